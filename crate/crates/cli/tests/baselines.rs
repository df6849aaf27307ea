//! Directional comparisons between methods at desk scale, averaged over the
//! five verification seeds with the default experiment config.

use std::sync::OnceLock;

use fasten_cli::runner::prepare;
use fasten_cli::verify::{Lab, Setup, SEEDS};
use fasten_core::train::Method;

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(Lab::new)
}

fn mean_acc(method: Method, gamma: f64) -> f64 {
    100.0 * lab().mean_accuracy(&Setup::new(method, gamma))
}

#[test]
fn vanilla_without_noise_is_near_the_bayes_rate() {
    let bayes = SEEDS
        .iter()
        .map(|&s| prepare(&Setup::new(Method::VanillaCe, 0.0).resolve(s)).unwrap().bayes_test_accuracy)
        .sum::<f64>()
        / SEEDS.len() as f64;
    let vanilla = mean_acc(Method::VanillaCe, 0.0);
    println!("vanilla {vanilla:.2}% vs nearest-mean {:.2}%", 100.0 * bayes);
    assert!((vanilla - 100.0 * bayes).abs() <= 3.0);
}

#[test]
fn heavy_noise_degrades_vanilla() {
    let (clean, noisy) = (mean_acc(Method::VanillaCe, 0.0), mean_acc(Method::VanillaCe, 0.8));
    println!("vanilla γ=0 {clean:.2}% vs γ=0.8 {noisy:.2}%");
    assert!(noisy < clean);
}

#[test]
fn estimated_transition_is_not_worse_than_oversampling() {
    let (no_lc, over) = (mean_acc(Method::FastenNoLc, 0.6), mean_acc(Method::NaiveOversampling, 0.6));
    println!("no-LC {no_lc:.2}% vs oversampling {over:.2}%");
    assert!(no_lc >= over);
}

#[test]
fn oracle_transition_is_not_worse_than_vanilla() {
    let (oracle, vanilla) = (mean_acc(Method::OracleT, 0.6), mean_acc(Method::VanillaCe, 0.6));
    println!("oracle {oracle:.2}% vs vanilla {vanilla:.2}%");
    assert!(oracle >= vanilla);
}

#[test]
fn correction_is_not_worse_than_no_correction() {
    let (fasten, no_lc) = (mean_acc(Method::Fasten, 0.6), mean_acc(Method::FastenNoLc, 0.6));
    println!("fasten {fasten:.2}% vs no-LC {no_lc:.2}%");
    assert!(fasten >= no_lc);
}

#[test]
fn two_stage_glc_takes_longer_than_one_stage() {
    let seconds = |m: Method| -> f64 {
        lab().histories(&Setup::new(m, 0.6), &SEEDS).iter().map(|h| h.total_seconds()).sum()
    };
    let (glc, fasten) = (seconds(Method::GlcTwoStage), seconds(Method::Fasten));
    println!("glc {glc:.2}s vs fasten {fasten:.2}s");
    assert!(glc > fasten);
}
