//! EER of two toy systems and of their weighted ensemble.

use spoofnet::evaluation::{eer_of, ensemble_scores, EnsembleSpec, Normalization, TrialScore};
use spoofnet::Label;

fn system(scores: &[(&str, f64)]) -> Vec<TrialScore> {
    scores
        .iter()
        .map(|&(id, s)| {
            let label = if id.starts_with('b') { Label::Bonafide } else { Label::Spoof };
            TrialScore::new(id, Some(label), s)
        })
        .collect()
}

fn main() -> spoofnet::Result<()> {
    let a = system(&[("b1", 1.0), ("b2", 0.0), ("b3", 0.9), ("s1", 1.0), ("s2", 0.0), ("s3", 0.2)]);
    let b = system(&[("b1", 0.0), ("b2", 1.0), ("b3", 0.4), ("s1", -1.0), ("s2", -2.0), ("s3", 0.5)]);
    println!("system A  EER {:.3}", eer_of(&a)?.eer);
    println!("system B  EER {:.3}", eer_of(&b)?.eer);
    for weights in [vec![0.4, 0.6], vec![0.3, 0.7], vec![1.0, 0.0]] {
        for norm in [Normalization::None, Normalization::MinMax] {
            let mut spec = EnsembleSpec::new(vec![a.clone(), b.clone()], weights.clone());
            spec.normalization = norm;
            let fused = ensemble_scores(&spec)?;
            println!("weights {weights:?} {norm:?}: EER {:.3}", eer_of(&fused)?.eer);
        }
    }
    Ok(())
}
