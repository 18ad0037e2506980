use freqscreen::config::{BranchSelection, RunConfig};
use freqscreen::datagen::generate;
use freqscreen::model::ModelParams;
use freqscreen::trainer::Trainer;

fn run(cfg: &RunConfig, seed: u64, sel: BranchSelection) -> (f64, f64) {
    let mut train_cfg = cfg.train.clone();
    sel.apply(&mut train_cfg);
    let data = generate(&cfg.data, seed).unwrap();
    let model = ModelParams::init(cfg.model.clone(), seed, train_cfg.sigma_init, None).unwrap();
    let mut trainer = Trainer::new(model, train_cfg, seed).unwrap();
    let fit = trainer
        .fit(&data.train, &data.in_domain_test, Some(&data.ood_test), |_| {})
        .unwrap();
    (fit.final_in_domain.m_qwk, fit.final_ood.unwrap().m_qwk)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let lr_adv: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let tau: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.95);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::default();
    cfg.train.lr_main = lr;
    cfg.train.lr_adv = lr_adv;
    cfg.train.tau = tau;

    for (name, sel) in [
        ("teacher", BranchSelection::Teacher),
        ("ts1", BranchSelection::TeacherS1),
        ("ts2", BranchSelection::TeacherS2),
        ("full", BranchSelection::Full),
    ] {
        let t0 = std::time::Instant::now();
        let (i, o) = run(&cfg, seed, sel);
        println!("{name:8} in={i:.3} ood={o:.3}  ({:?})", t0.elapsed());
    }
}
