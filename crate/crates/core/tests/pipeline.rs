use hatlab::calc::CalculatorRegistry;
use hatlab::manifest::{Dataset, Split, SystemKind};
use hatlab::pipeline::{self, PipelineConfig};

fn small_config(dir: &std::path::Path, seed: u64) -> PipelineConfig {
    let text = format!(
        "seed = {seed}\nworkers = 1\n[templates]\nmax_atoms = 30\n[hat]\nn_configs = 60\nn_interp = 4\n[train]\nmax_epochs = 20\n[eval]\ncurve_sizes = [20, 40]\ntransfer_threshold = 20\n"
    );
    PipelineConfig::from_toml(&text, dir).unwrap()
}

#[test]
fn end_to_end_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let reg = CalculatorRegistry::with_builtins();
    let t = std::time::Instant::now();
    let g = pipeline::cmd_generate(&cfg, &reg).unwrap();
    eprintln!("generate {:?}: {}", t.elapsed(), g.lines().join(" "));
    assert_eq!((g.n_single, g.n_interp, g.n_failed), (60, 4, 0));
    let l = pipeline::cmd_label(&cfg, &reg).unwrap();
    assert_eq!(l.n_failed, 0);
    assert_eq!(l.n_frames, 60 + 48);
    pipeline::cmd_split(&cfg).unwrap();
    let ds = Dataset::load(cfg.dataset_dir()).unwrap();
    assert!(ds.records_where(SystemKind::Interp, Some(Split::Train)).next().is_none());
    let t = std::time::Instant::now();
    let tr = pipeline::cmd_train(&cfg).unwrap();
    eprintln!("train {:?}: {}", t.elapsed(), tr.lines().join(" "));
    let ev = pipeline::cmd_eval(&cfg, None).unwrap();
    eprintln!("{}", ev.lines().join(" "));
    assert!(ev.metrics.energy_mae_mev.is_finite());

    let trained = hatlab::mlp::load_checkpoint(cfg.checkpoint_path()).unwrap().model;
    let untrained = hatlab::mlp::Model::new(cfg.model.clone(), trained.scaler.clone()).unwrap();
    let base = pipeline::evaluate_model(&untrained, &ds, 64).unwrap();
    assert!(
        ev.metrics.force_mae_mev_ang < base.metrics.force_mae_mev_ang,
        "trained {} vs untrained {}",
        ev.metrics.force_mae_mev_ang,
        base.metrics.force_mae_mev_ang
    );
}
