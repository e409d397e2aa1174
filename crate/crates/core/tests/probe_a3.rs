use amoe_smc::adaptation::{adapt_with_pilot, AdaptationConfig, GatingKind};
use amoe_smc::diagnostics::reference_divergence_from_partition;
use amoe_smc::models::{LinearGaussianMixtureModel, ObservationKernel, PriorProposal, StateSpaceModel};
use amoe_smc::rng::substream;
use amoe_smc::sample::WeightedSample;
use amoe_smc::smc::{default_initial_mixture, AdaptedProposal};
use amoe_smc::strata::StratumFamily;
use nalgebra::DVector;

#[test]
fn probe_a3_variants() {
    const SEED: u64 = 0xA3;
    let model = LinearGaussianMixtureModel::new();
    let n = 20_000;
    let mut rng0 = substream(SEED, 0, 0);
    let ancestors =
        WeightedSample::uniform((0..n).map(|_| model.initial_sampler(&mut rng0)).collect()).unwrap();
    let y = DVector::from_vec(vec![1.0, 0.0]);
    let kernel = ObservationKernel::new(&model, y.clone()).unwrap();
    let partition: Vec<f64> = ancestors
        .particles
        .iter()
        .map(|xi| model.optimal_adjustment(xi, &y).unwrap())
        .collect();
    let reference =
        reference_divergence_from_partition(&ancestors.normalized_weights(), &partition).unwrap();
    println!("reference divergence {reference:.4}");
    let pilot = PriorProposal { model: &model };

    let variants: Vec<(&str, Vec<f64>)> = vec![
        ("pilot const 0.0224", vec![0.1 / 20f64.sqrt(); 20]),
        ("pilot 0.1/sqrt(l)", (1..=20).map(|l| 0.1 / (l as f64).sqrt()).collect()),
        ("pilot const 0.1", vec![0.1; 20]),
        ("pilot const 1.0", vec![1.0; 20]),
    ];
    for (label, steps) in variants {
        let mut config = AdaptationConfig::constant_schedule(20, 1_000, 0.1);
        config.step_sizes = steps;
        config.kld_reference_size = Some(20_000);
        let spec = AdaptedProposal {
            adaptation: config.clone(),
            n_components: 2,
            family: StratumFamily::Gaussian,
            gating: GatingKind::Logistic,
            pooled: false,
            warm_start: false,
        };
        let initial = default_initial_mixture(&ancestors, &spec).unwrap();
        let mut rng = substream(SEED, 1, 0);
        let (fitted, trace) =
            adapt_with_pilot(&initial, &ancestors, &kernel, &pilot, &config, &mut rng).unwrap();
        let series: Vec<String> =
            trace.kld_series().iter().map(|k| format!("{:.3}", k.divergence)).collect();
        let last = trace.records[19].kld.as_ref().unwrap();
        println!(
            "{label}: final {:.4} +- {:.4} | series {}",
            last.divergence,
            last.divergence_standard_error,
            series.join(" ")
        );
        if label.contains("1.0") {
            for (j, e) in fitted.experts.iter().enumerate() {
                let r: Vec<String> = e.regression.iter().map(|v| format!("{v:.3}")).collect();
                println!("  expert {j} reg [{}]", r.join(" "));
            }
            if let amoe_smc::experts::GatingParams::Logistic(beta) = &fitted.gating {
                let b: Vec<String> = beta.iter().map(|v| format!("{v:.3}")).collect();
                println!("  beta [{}]", b.join(" "));
            }
        }
    }
}
