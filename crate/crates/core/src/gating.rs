//! Pathway routing, the Level-1 class gate, and experience-based routing
//! targets.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sample_f1, Conventions};
use crate::nn::Network;
use crate::taxonomy::{Branch, LabelVector};

/// Level-2 pathway. Declaration order is the routing-vector order and the
/// tie-break priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pathway {
    #[serde(rename = "M")]
    Multimodal,
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "T")]
    Textual,
}

impl Pathway {
    pub const ALL: [Pathway; 3] = [Pathway::Multimodal, Pathway::Visual, Pathway::Textual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Multimodal => "M",
            Pathway::Visual => "V",
            Pathway::Textual => "T",
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut d = [0.0; 3];
        d[self.index()] = 1.0;
        d
    }
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const NORM_TOL: f64 = 1e-9;

fn check_distribution(d: &[f64], len: usize) -> Result<()> {
    if d.len() != len {
        return Err(Error::shape(format!("distribution of length {len}"), d.len()));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > NORM_TOL || d.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Domain(format!("not a probability distribution (sum {s})")));
    }
    Ok(())
}

/// First maximum wins.
fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One-hot routing at the argmax; ties go to M, then V, then T.
pub fn hard_gate(distribution: &[f64]) -> Result<Pathway> {
    check_distribution(distribution, 3)?;
    Ok(Pathway::ALL[argmax_first(distribution)])
}

/// Branch decision from the Level-1 distribution (fiction first); ties go to
/// fiction.
pub fn class_gate(yhat1: &[f64]) -> Result<Branch> {
    check_distribution(yhat1, 2)?;
    Ok(if yhat1[Branch::Fiction.index()] >= 0.5 { Branch::Fiction } else { Branch::Nonfiction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwayDecision {
    /// Ordered (M, V, T).
    pub distribution: [f64; 3],
    pub hard: Pathway,
}

impl PathwayDecision {
    pub fn from_distribution(d: &[f64]) -> Result<Self> {
        let hard = hard_gate(d)?;
        Ok(PathwayDecision { distribution: [d[0], d[1], d[2]], hard })
    }
}

/// Run the routing network on rows of `[visual | blurb]` SGM features.
pub fn sgm_forward(phi_s: &Network, features: ArrayView2<f64>) -> Result<Vec<PathwayDecision>> {
    if phi_s.output_dim() != 3 {
        return Err(Error::shape("routing network with 3 outputs", phi_s.output_dim()));
    }
    let (dist, _) = phi_s.forward(features)?;
    dist.rows().into_iter().map(|r| PathwayDecision::from_distribution(r.as_slice().expect("standard layout"))).collect()
}

/// Routing supervision for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgmTarget {
    pub id: String,
    /// `None` when no pathway got anything right.
    pub target: Option<Pathway>,
}

impl SgmTarget {
    pub fn excluded(&self) -> bool {
        self.target.is_none()
    }
}

/// Per-pathway sample F1 (as a fraction) of branch-routed predictions
/// against the truth; a wrong branch scores 0.
pub fn pathway_scores(predictions: &[(Branch, Vec<bool>); 3], truth: &LabelVector) -> [f64; 3] {
    let conv = Conventions::default();
    let mut scores = [0.0; 3];
    for (s, (branch, pred)) in scores.iter_mut().zip(predictions) {
        if *branch == truth.branch {
            *s = sample_f1(&truth.level2, pred, &conv) / 100.0;
        }
    }
    scores
}

/// Target = best-scoring pathway (ties M > V > T); excluded when all score 0.
pub fn target_from_scores(id: &str, scores: [f64; 3]) -> SgmTarget {
    let target = if scores.iter().all(|&s| s == 0.0) { None } else { Some(Pathway::ALL[argmax_first(&scores)]) };
    SgmTarget { id: id.to_string(), target }
}

pub fn build_sgm_target(id: &str, predictions: &[(Branch, Vec<bool>); 3], truth: &LabelVector) -> SgmTarget {
    target_from_scores(id, pathway_scores(predictions, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec, OutputActivation};
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn hard_gate_examples() {
        assert_eq!(hard_gate(&[0.2, 0.5, 0.3]).unwrap(), Pathway::Visual);
        assert_eq!(hard_gate(&[1.0, 0.0, 0.0]).unwrap(), Pathway::Multimodal);
        assert_eq!(hard_gate(&[0.4, 0.4, 0.2]).unwrap(), Pathway::Multimodal);
        assert_eq!(hard_gate(&[0.2, 0.4, 0.4]).unwrap(), Pathway::Visual);
        assert!(matches!(hard_gate(&[0.5, 0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn class_gate_examples() {
        assert_eq!(class_gate(&[0.9, 0.1]).unwrap(), Branch::Fiction);
        assert_eq!(class_gate(&[0.1, 0.9]).unwrap(), Branch::Nonfiction);
        assert_eq!(class_gate(&[0.5, 0.5]).unwrap(), Branch::Fiction);
        assert!(class_gate(&[0.9, 0.9]).is_err());
    }

    #[test]
    fn zero_final_layer_routes_to_multimodal() {
        let mut net = Network::new(NetworkSpec::stack(8, &[4, 2], Activation::Gelu, (3, OutputActivation::Softmax)), 1).unwrap();
        net.zero_output_layer();
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i * j) as f64 * 0.1 - 1.0);
        for d in sgm_forward(&net, x.view()).unwrap() {
            assert!(d.distribution.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
            assert_eq!(d.hard, Pathway::Multimodal);
        }
    }

    #[test]
    fn targets() {
        assert_eq!(target_from_scores("a", [1.0, 0.5, 0.5]).target, Some(Pathway::Multimodal));
        assert!(target_from_scores("a", [0.0, 0.0, 0.0]).excluded());
        assert_eq!(target_from_scores("a", [0.8, 0.8, 0.2]).target, Some(Pathway::Multimodal));
        assert_eq!(target_from_scores("a", [0.1, 0.3, 0.3]).target, Some(Pathway::Visual));
    }

    #[test]
    fn wrong_branch_scores_zero() {
        let truth = LabelVector { branch: Branch::Fiction, level2: vec![true, false] };
        let preds = [
            (Branch::Nonfiction, vec![true, false]),
            (Branch::Fiction, vec![true, true]),
            (Branch::Fiction, vec![false, false]),
        ];
        let s = pathway_scores(&preds, &truth);
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
        assert_eq!(build_sgm_target("x", &preds, &truth).target, Some(Pathway::Visual));
    }

    proptest! {
        #[test]
        fn hard_gate_is_an_argmax(raw in prop::array::uniform3(0.0f64..1.0), shift in -20.0f64..20.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-12;
            let d: Vec<f64> = raw.iter().map(|x| (x + 1e-12 / 3.0) / s).collect();
            let h = hard_gate(&d).unwrap();
            let max = d.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(d[h.index()], max);
            prop_assert_eq!(h.one_hot().iter().sum::<f64>(), 1.0);

            // shifting logits leaves the decision unchanged
            let mut logits: Vec<f64> = d.iter().map(|p| p.max(1e-300).ln()).collect();
            let mut a = logits.clone();
            crate::nn::softmax_in_place(&mut a);
            for l in &mut logits { *l += shift; }
            crate::nn::softmax_in_place(&mut logits);
            prop_assert_eq!(argmax_first(&a), argmax_first(&logits));
        }

        #[test]
        fn target_never_below_another(scores in prop::array::uniform3(prop_oneof![Just(0.0), Just(0.5), 0.0f64..1.0])) {
            let t = target_from_scores("p", scores);
            if let Some(p) = t.target {
                prop_assert!(scores.iter().all(|&s| s <= scores[p.index()]));
            } else {
                prop_assert!(scores.iter().all(|&s| s == 0.0));
            }
        }
    }
}
