use d2moe::factorize::RankPolicy;
use d2moe::pipeline::{CalibrationContext, CompressionConfig, NoObserver};
use d2moe_cli::config::{KeyValues, RunConfig};
use d2moe_cli::container::{Container, ContainerError};
use d2moe_cli::driver::run_compression;
use d2moe_cli::error::CliError;
use d2moe_cli::fixture::{gen_fixture, Fixture, FixtureSpec};
use d2moe_cli::io::*;
use d2moe_cli::report::CompressionReport;

fn small() -> Fixture {
    gen_fixture(&FixtureSpec { n_experts: 4, d_model: 8, hidden: 12, tokens: 96, rank_noise: 2, ..Default::default() }).unwrap()
}

fn run_config(pairs: &[(&str, &str)]) -> RunConfig {
    let mut kv = KeyValues::default();
    for (k, v) in pairs {
        kv.set(k, v);
    }
    RunConfig::from_kv(&kv).unwrap()
}

#[test]
fn save_load_resave_is_byte_identical() {
    let f = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.d2m");
    save(&dense_to_container(&f.model).unwrap(), &path).unwrap();
    let loaded = Container::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(dense_from_container(&loaded).unwrap(), f.model);

    let cal_path = dir.path().join("c.d2m");
    save(&calibration_to_container(&f.calibration).unwrap(), &cal_path).unwrap();
    assert_eq!(calibration_from_container(&Container::load(&cal_path).unwrap()).unwrap(), f.calibration);
}

#[test]
fn truncated_file_names_the_tensor() {
    let f = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.d2m");
    let bytes = dense_to_container(&f.model).unwrap().to_bytes();
    std::fs::write(&path, &bytes[..bytes.len() - 200]).unwrap();
    match Container::load(&path) {
        Err(CliError::Container { source: ContainerError::Truncated { tensor, .. }, .. }) => assert_eq!(tensor, "head"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn loaded_compressed_model_forward_is_bit_exact() {
    let f = small();
    let rc = run_config(&[("ratio_delta", "0.4"), ("sparsity", "0.4"), ("trim", "1")]);
    let (model, _) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    let bytes = runtime_to_container(&model).unwrap().to_bytes();
    let back = runtime_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, model);
    let t = &f.calibration.tokens;
    assert_eq!(back.logits(t, 16).unwrap(), model.logits(t, 16).unwrap());
}

#[test]
fn compression_is_deterministic_and_stats_path_matches() {
    let f = small();
    let rc = run_config(&[("ratio_delta", "0.5"), ("sparsity", "0.2"), ("fisher_seed", "9")]);
    let (m1, r1) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    let (m2, r2) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    let bytes = runtime_to_container(&m1).unwrap().to_bytes();
    assert_eq!(bytes, runtime_to_container(&m2).unwrap().to_bytes());
    assert_eq!(r1.to_text().unwrap(), r2.to_text().unwrap());

    let ctx = CalibrationContext::prepare(&f.model, &f.calibration.tokens, Some(&f.calibration.labels), &rc.compression, &mut NoObserver)
        .unwrap();
    let stats = stats_to_container(&ctx.layers, ctx.fisher.as_ref()).unwrap();
    let reloaded = stats_from_container(&Container::from_bytes(&stats.to_bytes()).unwrap()).unwrap();
    let (m3, r3) = run_compression(&f.model, &f.calibration, Some(reloaded), &rc).unwrap();
    assert_eq!(runtime_to_container(&m3).unwrap().to_bytes(), bytes);
    assert_eq!(r3.to_text().unwrap(), r1.to_text().unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let f = small();
    let rc = run_config(&[("sparsity", "0.3")]);
    let (a, ra) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (b, rb) = pool.install(|| run_compression(&f.model, &f.calibration, None, &rc)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn report_round_trip_with_layers() {
    let f = small();
    let rc = run_config(&[("sparsity", "0.4"), ("trim", "2"), ("timings", "on")]);
    let (_, rep) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    assert!(!rep.timings.is_empty());
    let text = rep.to_text().unwrap();
    let back = CompressionReport::parse(&text).unwrap();
    assert_eq!(back, rep);
    assert_eq!(back.to_text().unwrap(), text);
    assert_eq!(rep.layers[0].trimmed.len(), 2);
}

#[test]
fn lossless_report_shows_decomposition_overhead() {
    let f = small();
    let rc = run_config(&[("profile", "lossless")]);
    let (_, rep) = run_compression(&f.model, &f.calibration, None, &rc).unwrap();
    let e = rep.eval.unwrap();
    assert!((e.loss_after - e.loss_before).abs() <= 1e-7);
    for l in &rep.layers {
        // Full-rank factors cost (rows + cols)·min per matrix, at least the (n+1)·m of base plus full deltas.
        assert!(l.params.census_static >= (l.params.n + 1) * l.params.m);
        assert_eq!(l.params.compressed_static, l.params.census_static as f64);
    }
}

#[test]
fn stats_that_do_not_fit_are_rejected() {
    let f = small();
    let other = gen_fixture(&FixtureSpec { n_experts: 3, d_model: 8, hidden: 12, tokens: 32, rank_noise: 2, ..Default::default() }).unwrap();
    let config = CompressionConfig { rank_policy: RankPolicy::Ratio(0.5), ..Default::default() };
    let ctx = CalibrationContext::prepare(&other.model, &other.calibration.tokens, None, &config, &mut NoObserver).unwrap();
    let rc = run_config(&[]);
    let err = run_compression(&f.model, &f.calibration, Some(ctx), &rc).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn wrong_container_kind_is_rejected() {
    let f = small();
    let cal = calibration_to_container(&f.calibration).unwrap();
    assert!(dense_from_container(&cal).is_err());
    assert!(runtime_from_container(&cal).is_err());
    assert!(stats_from_container(&cal).is_err());
}
