use qpatdot::config::*;
use qpatdot::pipeline::*;

fn main() {
    for damp in [1.0f64, 0.1, 0.02] {
        // sensitivity experiment
        let mut config = ExperimentConfig::preset(Preset::Medium);
        config.phantom = Phantom::PointGaussians;
        config.kappa = 0.0;
        config.init = InitChoice::SmoothedTruth { std: 1.5 };
        config.optimizer.sigma_scaling = damp;
        let mesh = build_mesh(&config).unwrap();
        let data = prepare_dataset(&config, &mesh).unwrap();
        let rep = gamma_sensitivity_experiment(&config, &mesh, &data).unwrap();
        print!("damp={damp}: sens sigma {:.4} gamma {:.4} | ", rep.sigma_linf, rep.gamma_linf);
        // mixture twin
        let mut c2 = ExperimentConfig::preset(Preset::Medium);
        c2.kappa = 0.0;
        c2.init = InitChoice::SmoothedTruth { std: 1.5 };
        c2.optimizer.sigma_scaling = damp;
        let mesh2 = build_mesh(&c2).unwrap();
        let data2 = prepare_dataset(&c2, &mesh2).unwrap();
        let r = run_three_stage(&mesh2, &c2, &data2).unwrap();
        for row in r.summary().unwrap() {
            print!("{} {:.4} ", row.name, row.rel_l2);
        }
        println!();
    }
}
