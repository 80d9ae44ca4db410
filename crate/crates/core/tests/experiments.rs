use std::f64::consts::FRAC_PI_2;
use std::io::BufReader;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socialdrive_core::config::RunConfig;
use socialdrive_core::dpl::{window_starts, DplConfig, DplModel};
use socialdrive_core::drivers::DriverStyle;
use socialdrive_core::env::{Outcome, SocialConfig};
use socialdrive_core::experiments::dataset::*;
use socialdrive_core::experiments::record::{record_episode, replay, LogLine};
use socialdrive_core::experiments::report::*;
use socialdrive_core::experiments::runs::*;
use socialdrive_core::policy::{PolicyConfig, PolicyNet};
use socialdrive_core::ppo::PriorModel;
use socialdrive_core::Error;
use socialdrive_nn::ParamStore;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.policy = PolicyConfig {
        encoder_hidden: 8,
        encoder_out: 8,
        attention_dim: 8,
        heads: 2,
        attention_out: 8,
        decoder_hidden: 8,
        prior_dim: 0,
    };
    c.ppo.total_steps = 60;
    c.ppo.buffer_cap = 30;
    c.ppo.minibatch = 30;
    c.env.max_steps = 30;
    c.experiment.seeds = 2;
    c.experiment.eval_episodes = 2;
    c.experiment.workers = 2;
    c
}

fn tiny_prior(latent: usize) -> Arc<PriorModel> {
    let cfg = DplConfig {
        embed_dim: 4,
        gru_hidden: 6,
        fc_dim: 6,
        latent_dim: latent,
        ..DplConfig::default()
    };
    let mut store = ParamStore::new();
    let model = DplModel::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    Arc::new(PriorModel { model, store })
}

fn params(c: &RunConfig, episodes: usize, seed: u64) -> DatasetParams<'_> {
    DatasetParams {
        episodes,
        seed,
        steps: 60,
        layout: &c.layout,
        drivers: &c.drivers,
        env: &c.env,
    }
}

#[test]
fn windows_follow_the_stride_rule() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::default();
    let path = dir.path().join("d.jsonl");
    generate_dataset(&params(&c, 4, 3), &path).unwrap();
    let eps = read_dataset(&path).unwrap();
    let cfg = DplConfig::default();
    for ep in &eps {
        for v in &ep.vehicles {
            assert!(v.states.len() <= 60);
            let n = window_starts(v.states.len(), 20, 5).len();
            if v.states.len() == 60 {
                assert_eq!(n, 9);
            }
            let got = extract_windows(
                &[EpisodeRecord { episode_id: ep.episode_id, vehicles: vec![v.clone()] }],
                &cfg,
            );
            assert_eq!(got.len(), n);
        }
    }
    assert_eq!(window_starts(60, 20, 5).len(), 9);
}

#[test]
fn dataset_is_byte_reproducible_and_manifest_matches() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::default();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let ma = generate_dataset(&params(&c, 3, 7), &a).unwrap();
    generate_dataset(&params(&c, 3, 7), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ma.config_hash, params(&c, 3, 7).hash());
    assert_ne!(ma.config_hash, params(&c, 3, 8).hash());
    let names: Vec<&str> = ma.style_counts.keys().map(String::as_str).collect();
    assert_eq!(names, vec!["aggressive", "conservative", "moderate"]);
    for s in DriverStyle::ALL {
        assert!(ma.style_counts.contains_key(s.name()));
    }
    assert_eq!(ma.style_counts.values().sum::<usize>(), ma.vehicles);
    let on_disk: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(&a)).unwrap()).unwrap();
    assert_eq!(on_disk, ma);
}

#[test]
fn dataset_steps_are_physically_plausible() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::default();
    let path = dir.path().join("d.jsonl");
    generate_dataset(&params(&c, 5, 11), &path).unwrap();
    let bound = c.layout.v_max * c.env.decision_dt * 1.5;
    for ep in read_dataset(&path).unwrap() {
        for v in &ep.vehicles {
            for w in v.positions().windows(2) {
                let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
                assert!(d <= bound, "vehicle {} moved {d} m", v.id);
            }
        }
    }
}

#[test]
fn dataset_parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"episode_id\":0,\"vehicles\":[]}\nnot json\n").unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_episode_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::default();
    assert!(generate_dataset(&params(&c, 0, 0), dir.path().join("d.jsonl")).is_err());
}

#[test]
fn default_config_validates_and_round_trips() {
    let c = RunConfig::default();
    c.validate().unwrap();
    assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    assert_eq!(c.experiment.phis.len(), 7);
    assert!((c.experiment.phis[6] - FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn unknown_keys_are_errors_with_paths() {
    let err = RunConfig::from_json(r#"{"ppo": {"clip": 0.2, "bogus": 1}}"#).unwrap_err();
    let s = err.to_string();
    assert!(s.contains("ppo") && s.contains("bogus"), "{s}");
    let err = RunConfig::default().with_overrides(&["ppo.bogus=1"]).unwrap_err();
    assert!(err.to_string().contains("ppo.bogus"), "{err}");
    assert!(RunConfig::default().with_overrides(&["nosuch.key=1"]).is_err());
    assert!(RunConfig::default().with_overrides(&["ppo.clip"]).is_err());
}

#[test]
fn type_errors_name_the_field() {
    let err = RunConfig::from_json(r#"{"env": {"max_steps": "many"}}"#).unwrap_err();
    assert!(err.to_string().contains("env.max_steps"), "{err}");
}

#[test]
fn overrides_parse_json_values() {
    let c = RunConfig::default()
        .with_overrides(&["experiment.phis=[0,0.2618]", "ppo.lr=0.001", "social.phi=0.5", "env.vehicle.wheelbase=2.5"])
        .unwrap();
    assert_eq!(c.experiment.phis, vec![0.0, 0.2618]);
    assert_eq!(c.ppo.lr, 0.001);
    assert_eq!(c.social.phi, 0.5);
    assert_eq!(c.env.vehicle.wheelbase, 2.5);
}

#[test]
fn validation_reports_field_paths() {
    let cases = [
        ("ppo.clip=1.5", "ppo.clip"),
        ("ppo.minibatch=5000", "ppo.minibatch"),
        ("dpl.window=1", "dpl.window"),
        ("policy.heads=3", "policy."),
        ("experiment.phis=[2.0]", "experiment.phis"),
        ("social.phi=3", "social"),
        ("policy.prior_dim=5", "policy.prior_dim"),
    ];
    for (set, path) in cases {
        let c = RunConfig::default().with_overrides(&[set]).unwrap();
        let err = c.validate().unwrap_err();
        match &err {
            Error::Config { path: p, .. } => assert!(p.starts_with(path), "{set}: {p}"),
            other => panic!("{set}: {other:?}"),
        }
    }
}

#[test]
fn fan_out_keeps_job_order() {
    let out = fan_out((0..20).collect(), 4, |&i: &u64| Ok(i * i)).unwrap();
    assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
    let err = fan_out(vec![1, 2, 3], 2, |&i: &i32| if i == 2 { Err(Error::Invalid("x".into())) } else { Ok(i) });
    assert!(err.is_err());
}

#[test]
fn training_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let ra = train_policy(&c, Some(tiny_prior(3)), 5, 0.3, Some(&a)).unwrap();
    let rb = train_policy(&c, Some(tiny_prior(3)), 5, 0.3, Some(&b)).unwrap();
    assert_eq!(ra.eval, rb.eval);
    for f in ["metrics.csv", "eval.json", "checkpoints/policy.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (_, loaded) = PolicyNet::load(&policy_config(&c, Some(&tiny_prior(3))), a.join("checkpoints/policy.ckpt")).unwrap();
    for (x, y) in loaded.iter().zip(ra.store.iter()) {
        assert_eq!(x.value.data(), y.value.data());
    }
}

#[test]
fn identical_arms_have_zero_difference() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_prior_ablation(&tiny(), None, 0, Some(dir.path())).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.difference, 0.0);
    for row in &r.rows {
        assert_eq!(row.prior_return, row.no_prior_return);
    }
    // both learning curves are present at every update
    let t = CsvTable::read(&dir.path().join("curves.csv")).unwrap();
    let arms = t.strings("arm").unwrap();
    let updates = tiny().ppo.total_steps / tiny().ppo.buffer_cap;
    assert_eq!(arms.iter().filter(|a| *a == "prior").count(), 2 * updates);
    assert_eq!(arms.iter().filter(|a| *a == "no_prior").count(), 2 * updates);
}

#[test]
fn ablation_with_prior_runs_both_arms() {
    let mut c = tiny();
    c.experiment.seeds = 1;
    let r = run_prior_ablation(&c, Some(tiny_prior(4)), 3, None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.mean_prior.is_finite() && r.mean_no_prior.is_finite());
}

#[test]
fn sweep_table_is_exhaustive_and_mixes_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.experiment.phis = vec![0.0, FRAC_PI_2];
    let rows = run_ct_sweep(&c, None, 0, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        if r.phi == 0.0 {
            assert_eq!(r.mean_return_global, r.mean_return_e);
        } else {
            assert!((r.mean_return_global - r.mean_return_c).abs() < 1e-9);
        }
    }
    let t = CsvTable::read(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert_eq!(
        t.header,
        vec!["phi", "seed", "mean_return_global", "mean_return_E", "mean_return_C", "collision_rate", "success_rate", "mean_av_speed", "mean_min_pet"]
    );
}

#[test]
fn empty_sweep_is_a_config_error() {
    let mut c = tiny();
    c.experiment.phis.clear();
    assert!(matches!(run_ct_sweep(&c, None, 0, None), Err(Error::Config { .. })));
}

const METRICS: &str = "update,env_steps,mean_return_E,mean_return_C,mean_return_global,policy_loss,value_loss,entropy,clip_frac,collision_rate,success_rate,phi,seed\n\
1,960,1.5,2.25,1.5,0.1,0.2,1.09,0,0.5,0.5,0,0\n\
2,1920,NaN,NaN,NaN,0.1,0.2,1.08,0.01,NaN,NaN,0,0\n\
3,2880,0.1234567890123,3.5,0.1234567890123,0.1,0.2,1.07,0.02,0.25,0.75,0,0\n";

#[test]
fn chart_points_equal_csv_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("metrics.csv"), METRICS).unwrap();
    emit_report(dir.path(), None).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("report/reward.svg")).unwrap();
    let lines = parse_polylines(&svg);
    // the NaN row splits each series in two
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], vec![(960.0, 1.5)]);
    assert_eq!(lines[1], vec![(2880.0, 0.1234567890123)]);
    assert_eq!(lines[2], vec![(960.0, 1.5)]);
    assert_eq!(lines[4], vec![(960.0, 2.25)]);
    assert_eq!(lines[5], vec![(2880.0, 3.5)]);
}

#[test]
fn reports_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        std::fs::write(d.path().join("metrics.csv"), METRICS).unwrap();
        std::fs::write(d.path().join("dpl_loss.csv"), "epoch,train_mse,val_mse,kl\n0,1,1,0\n1,0.5,0.6,0.1\n").unwrap();
    }
    let fa = emit_report(a.path(), None).unwrap();
    let fb = emit_report(b.path(), None).unwrap();
    assert_eq!(fa.len(), 3);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn empty_metrics_give_axes_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("metrics.csv"), METRICS.lines().next().unwrap()).unwrap();
    emit_report(dir.path(), None).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("report/reward.svg")).unwrap();
    assert!(svg.contains("class=\"axes\""));
    assert!(parse_polylines(&svg).is_empty());
    assert!(svg.trim_end().ends_with("</svg>"));
    let empty = line_chart("t", "x", "y", &[]);
    assert!(empty.contains("class=\"axes\""));
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{}1,2,3\n", &METRICS[..METRICS.find('\n').unwrap() + 1]);
    std::fs::write(dir.path().join("metrics.csv"), bad).unwrap();
    match emit_report(dir.path(), None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let bad = METRICS.replace("0.1234567890123,3.5", "oops,3.5");
    std::fs::write(dir.path().join("metrics.csv"), bad).unwrap();
    match emit_report(dir.path(), None) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("oops"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn smoothing_is_a_trailing_mean() {
    let s = smooth(&[1.0, 2.0, 3.0, 4.0, f64::NAN, 6.0], 2);
    assert_eq!(&s[..4], &[1.0, 1.5, 2.5, 3.5]);
    assert!(s[4].is_nan());
    assert_eq!(s[5], 6.0);
    assert_eq!(smooth(&[3.0, 5.0], 10), vec![3.0, 4.0]);
}

#[test]
fn bar_chart_values_round_trip() {
    let svg = bar_chart("b", "y", &["a".into(), "b".into()], &[("s".into(), vec![1.25, f64::NAN])]);
    assert!(svg.contains("data-value=\"1.25\""));
    assert_eq!(svg.matches("data-value").count(), 1);
}

fn recorded(phi: f64, seed: u64) -> (Vec<u8>, socialdrive_core::env::EpisodeResult) {
    let c = tiny();
    let p = tiny_prior(3);
    let pc = policy_config(&c, Some(&p));
    let mut store = ParamStore::<f32>::new();
    let net = PolicyNet::new(&mut store, &pc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut env = make_env(&RunConfig { social: SocialConfig { phi, ..c.social }, ..c.clone() }, phi, Some(p));
    let mut buf = Vec::new();
    let r = record_episode(&net, &store, &mut env, seed, &mut buf).unwrap();
    (buf, r)
}

#[test]
fn replay_rederives_logged_rewards() {
    for seed in 0..4 {
        let (log, result) = recorded(0.4, seed);
        let lines = replay(BufReader::new(log.as_slice()), "log").unwrap();
        assert_eq!(lines.len(), result.steps);
        for l in &lines {
            for (a, b) in [
                (l.reward.r_ego, l.logged_reward.r_ego),
                (l.reward.r_coord, l.logged_reward.r_coord),
                (l.reward.r_global, l.logged_reward.r_global),
            ] {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
        assert_eq!(lines.last().unwrap().outcome, Some(result.outcome));
    }
}

#[test]
fn replay_of_collision_stops_at_collision_step() {
    let (log, result) = (0..40)
        .map(|s| recorded(0.0, s))
        .find(|(_, r)| r.outcome == Outcome::Collided)
        .expect("a collision within 40 seeds");
    // append a bogus trailing decision: replay must not reach it
    let text = String::from_utf8(log).unwrap();
    let last = text.lines().last().unwrap().to_string();
    let padded = format!("{text}{last}\n");
    let lines = replay(BufReader::new(padded.as_bytes()), "log").unwrap();
    assert_eq!(lines.len(), result.steps);
    assert_eq!(lines.last().unwrap().outcome, Some(Outcome::Collided));
    assert!(lines[..lines.len() - 1].iter().all(|l| l.outcome.is_none()));
}

#[test]
fn replay_of_empty_log_is_empty() {
    assert!(replay(BufReader::new(&b""[..]), "log").unwrap().is_empty());
}

#[test]
fn corrupt_log_reports_line() {
    let (log, _) = recorded(0.0, 1);
    let text = String::from_utf8(log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"decision\": 17}";
    let bad = lines.join("\n");
    match replay(BufReader::new(bad.as_bytes()), "log") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let first: LogLine = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let orphan = serde_json::to_string(&first).unwrap();
    match replay(BufReader::new(orphan.as_bytes()), "log") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 1);
            assert!(msg.contains("before header"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn replay_observation_matches_environment() {
    let (log, _) = recorded(0.2, 2);
    let lines = replay(BufReader::new(log.as_slice()), "log").unwrap();
    let mut env = make_env(&tiny(), 0.2, None);
    let obs = env.env.reset(2).unwrap();
    let diff = lines[0]
        .observation
        .neighbors
        .iter()
        .flatten()
        .zip(obs.neighbors.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9);
    assert_eq!(lines[0].observation.mask, obs.mask);
}
