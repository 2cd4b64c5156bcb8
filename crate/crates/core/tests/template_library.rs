use hatlab::calc::{Calculator, SurrogateCalculator};
use hatlab::nms::{self, NmsConfig, NmsOutcome};
use hatlab::rng::RngStream;
use hatlab::templates;

#[test]
fn every_template_relaxes_to_a_true_minimum() {
    let calc = SurrogateCalculator::default();
    for t in templates::library() {
        let relaxed = nms::optimize_geometry(&t.structure, &calc, 1e-3).unwrap();
        assert!(relaxed.converged, "{} did not converge ({} steps)", t.name, relaxed.steps);
        let h = nms::compute_hessian(&relaxed.structure, &calc, nms::DEFAULT_HESSIAN_STEP).unwrap();
        let modes = nms::normal_mode_analysis(&h, &relaxed.structure, relaxed.energy)
            .unwrap_or_else(|e| panic!("{}: {e}", t.name));
        assert_eq!(modes.len(), 3 * t.len() - 6, "{}", t.name);
        assert!(modes.eigenvalues.iter().all(|&l| l > 0.0), "{}", t.name);
        // relaxation keeps the packaged topology
        let inferred = hatlab::structure::infer_bonds(&relaxed.structure, 1.25).unwrap();
        assert_eq!(inferred.as_slice(), t.structure.bonds().unwrap(), "{}", t.name);
        eprintln!(
            "{:16} n={:3} steps={:4} lowest={:7.1} cm-1 highest={:7.1} cm-1",
            t.name,
            t.len(),
            relaxed.steps,
            modes.frequencies_cm1[0],
            modes.frequencies_cm1.last().unwrap()
        );
    }
}

#[test]
fn nms_health_at_room_temperature() {
    let calc = SurrogateCalculator::default();
    let cfg = NmsConfig::default();
    let cold = NmsConfig { temperature_k: 100.0, ..cfg };
    let mut total = 0;
    let mut accepted = 0;
    let mut cold_accepted = 0;
    let mut consistent = 0;
    for t in templates::library() {
        let nm = nms::modes_for(&t.structure, &calc, 1e-3).unwrap();
        let mut rng = RngStream::root(9).child(&t.name).rng();
        for _ in 0..40 {
            total += 1;
            if let NmsOutcome::Accepted(s) = nms::nms_sample(&nm, &mut rng, &calc, &cfg).unwrap() {
                accepted += 1;
                assert!(s.delta_e <= cfg.max_de_ev);
                let e = calc.evaluate(&s.structure).unwrap().energy - nm.reference_energy;
                assert_eq!(e, s.delta_e);
            }
            if let NmsOutcome::Accepted(s) = nms::nms_sample(&nm, &mut rng, &calc, &cold).unwrap() {
                cold_accepted += 1;
                let ratio = s.delta_e / s.harmonic_energy;
                if (0.5..=2.0).contains(&ratio) {
                    consistent += 1;
                }
            }
        }
    }
    let rate = accepted as f64 / total as f64;
    let harmonic = consistent as f64 / cold_accepted as f64;
    eprintln!("acceptance at 300 K: {rate:.3}; harmonic consistency at 100 K: {harmonic:.3}");
    assert!(rate > 0.5);
    assert!(harmonic >= 0.9);
}
