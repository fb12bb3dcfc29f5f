//! Self-check of the causal identities: back-door adjustment against the
//! truncated factorization, and the sigmoid-of-expectation approximation.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scm::{contract_scores, nwgm_gap, DiscreteScm, DistTable, BACKDOOR_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmCheck {
    pub name: String,
    pub max_abs_gap: Option<f64>,
    pub pass: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwgmCase {
    pub scores: Vec<f64>,
    pub prior: Vec<f64>,
    /// Gap at contraction factors 1, 1/2, 1/4.
    pub gaps: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwgmSuite {
    pub constant_scores_max_gap: f64,
    pub degenerate_prior_max_gap: f64,
    pub contraction_monotone: bool,
    pub outputs_in_unit_interval: bool,
    pub max_gap: f64,
    pub cases: Vec<NwgmCase>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scms: Vec<ScmCheck>,
    pub max_backdoor_gap: f64,
    pub tolerance: f64,
    pub nwgm: NwgmSuite,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&ScmCheck> {
        self.scms.iter().filter(|c| !c.pass).collect()
    }
}

fn check(name: String, scm: Result<DiscreteScm, crate::Error>) -> ScmCheck {
    match scm.and_then(|s| s.verify_backdoor()) {
        Ok(r) => ScmCheck {
            name,
            max_abs_gap: Some(r.max_abs_gap),
            pass: r.pass,
            error: None,
        },
        Err(e) => ScmCheck {
            name,
            max_abs_gap: None,
            pass: false,
            error: Some(e.to_string()),
        },
    }
}

/// Random distribution with every entry at least 0.05 before normalization.
fn random_prior(rng: &mut ChaCha8Rng, n: usize) -> DistTable {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    DistTable::new(raw.into_iter().map(|v| v / s).collect()).expect("normalized")
}

/// The sigmoid-of-expectation suite. Contraction is checked on score
/// vectors of a single sign: on either side of 0 the sigmoid is convex or
/// concave, so pulling scores toward their mean cannot widen the gap. Across
/// the inflection point that fails.
pub fn nwgm_suite(seed: u64, cases: usize) -> NwgmSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut constant: f64 = 0.0;
    let mut degenerate: f64 = 0.0;
    let mut monotone = true;
    let mut in_unit = true;
    let mut max_gap: f64 = 0.0;
    let mut out = Vec::with_capacity(cases);
    let unit = |g: &crate::scm::NwgmGap| [g.exact, g.approx, g.gap].iter().all(|v| (0.0..=1.0).contains(v));
    for _ in 0..cases {
        let n = rng.random_range(2..=6);
        let prior = random_prior(&mut rng, n);
        let s0 = rng.random_range(-8.0..8.0);
        let g = nwgm_gap(&vec![s0; n], &prior).expect("valid");
        constant = constant.max(g.gap);
        in_unit &= unit(&g);
        let mut point = vec![0.0; n];
        point[rng.random_range(0..n)] = 1.0;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let g = nwgm_gap(&scores, &DistTable::new(point).expect("point mass")).expect("valid");
        degenerate = degenerate.max(g.gap);
        in_unit &= unit(&g);
        max_gap = max_gap.max(nwgm_gap(&scores, &prior).expect("valid").gap);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let same: Vec<f64> = (0..n).map(|_| sign * rng.random_range(0.0..8.0)).collect();
        let mut gaps = [0.0; 3];
        for (k, lambda) in [1.0, 0.5, 0.25].into_iter().enumerate() {
            let g = nwgm_gap(&contract_scores(&same, &prior, lambda), &prior).expect("valid");
            in_unit &= unit(&g);
            gaps[k] = g.gap;
        }
        monotone &= gaps[1] <= gaps[0] && gaps[2] <= gaps[1];
        max_gap = max_gap.max(gaps[0]);
        out.push(NwgmCase {
            scores: same,
            prior: prior.values().to_vec(),
            gaps,
        });
    }
    NwgmSuite {
        constant_scores_max_gap: constant,
        degenerate_prior_max_gap: degenerate,
        contraction_monotone: monotone,
        outputs_in_unit_interval: in_unit,
        max_gap,
        pass: constant == 0.0 && degenerate == 0.0 && monotone && in_unit,
        cases: out,
    }
}

/// Checks `n_random` seeded random SCMs (deterministic mediator, cardinalities
/// up to 4), the shipped confounded example, and any fixture files.
pub fn verify_suite(seed: u64, n_random: usize, fixtures: &[PathBuf]) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scms: Vec<ScmCheck> = (0..n_random)
        .map(|k| {
            let cards = DiscreteScm::random_cards(&mut rng, 4);
            check(
                format!("random[{k}] cards={cards:?}"),
                Ok(DiscreteScm::random(&mut rng, cards, true)),
            )
        })
        .collect();
    scms.push(check(
        "confounded_example".into(),
        Ok(DiscreteScm::confounded_example()),
    ));
    for p in fixtures {
        scms.push(check(p.display().to_string(), DiscreteScm::from_json_file(p)));
    }
    let max_backdoor_gap = scms.iter().filter_map(|c| c.max_abs_gap).fold(0.0, f64::max);
    let nwgm = nwgm_suite(seed, 20);
    let pass = scms.iter().all(|c| c.pass) && nwgm.pass;
    VerifyReport {
        scms,
        max_backdoor_gap,
        tolerance: BACKDOOR_TOL,
        nwgm,
        pass,
    }
}
