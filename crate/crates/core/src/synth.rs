//! Synthetic ground truth: contrastive records with a planted concept
//! direction, and scored items drawn from Gaussian populations whose best
//! achievable thresholds are known.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::decision::{threshold_serde, Answer, FirstToken, ScoredItem};
use crate::eval::{BenchmarkItem, Category, ContextMode, Speaker, Suite, Task, Turn};
use crate::rng::{derive_seed, SeededRng};
use crate::store::{ActivationRecord, ContainerHeader, Variant};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Contrastive records with `plus - minus = signal * direction + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d: usize,
    pub n_pairs: usize,
    /// Unit-norm planted concept direction.
    pub direction: Vec<f64>,
    pub signal: f64,
    /// Per-coordinate standard deviation of the isotropic arm noise.
    pub noise: f64,
    pub seed: u64,
    pub layers: Vec<u32>,
    /// Truncation indices per query; pair `i` is query `i / t`, `k = i % t + 1`.
    pub truncations_per_query: u32,
    /// Standard deviation of the shared per-pair base vector.
    pub base_scale: f64,
}

impl PlantedSpec {
    /// A spec with a direction drawn uniformly from the unit sphere.
    pub fn with_random_direction(
        d: usize,
        n_pairs: usize,
        signal: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        Self {
            d,
            n_pairs,
            direction: random_unit_vector(d, derive_seed(seed, u64::MAX)),
            signal,
            noise,
            seed,
            layers: vec![0],
            truncations_per_query: 1,
            base_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.d == 0 || self.n_pairs == 0 {
            return bad("d and n_pairs must be positive".into());
        }
        if self.direction.len() != self.d {
            return bad(format!(
                "direction has length {}, d is {}",
                self.direction.len(),
                self.d
            ));
        }
        let norm = self.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return bad(format!("direction norm is {norm}, expected 1"));
        }
        if self.signal.is_nan() || self.signal <= 0.0 {
            return bad(format!("signal must be > 0, got {}", self.signal));
        }
        if self.noise.is_nan()
            || self.noise < 0.0
            || self.base_scale.is_nan()
            || self.base_scale < 0.0
        {
            return bad("noise and base_scale must be >= 0".into());
        }
        if self.layers.is_empty() || self.truncations_per_query == 0 {
            return bad("need at least one layer and one truncation per query".into());
        }
        Ok(())
    }

    /// Header for a container holding every emitted layer.
    pub fn header(&self, model_id: &str) -> ContainerHeader {
        let layers = self.layers.iter().max().map_or(1, |l| l + 1);
        ContainerHeader::new(model_id, "meta-cognition", self.d, layers)
    }
}

pub fn random_unit_vector(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Emits `TrainContrastive` records, layer by layer, Experimental arm first.
/// Each layer draws from its own stream derived from `(seed, layer)`.
pub fn generate_planted(spec: &PlantedSpec) -> Result<Vec<ActivationRecord>> {
    spec.validate()?;
    let half = spec.signal / 2.0;
    let tpq = spec.truncations_per_query as usize;
    let mut out = Vec::with_capacity(spec.layers.len() * spec.n_pairs * 2);
    for &layer in &spec.layers {
        let mut rng = SeededRng::new(derive_seed(spec.seed, u64::from(layer)));
        for i in 0..spec.n_pairs {
            let base: Vec<f64> = (0..spec.d)
                .map(|_| spec.base_scale * rng.normal())
                .collect();
            let mut plus = Vec::with_capacity(spec.d);
            let mut minus = Vec::with_capacity(spec.d);
            for (b, u) in base.iter().zip(&spec.direction) {
                plus.push((b + half * u + spec.noise * rng.normal()) as f32);
            }
            for (b, u) in base.iter().zip(&spec.direction) {
                minus.push((b - half * u + spec.noise * rng.normal()) as f32);
            }
            let query_id = (i / tpq) as u64;
            let k = (i % tpq) as u32 + 1;
            out.push(ActivationRecord::contrastive(
                query_id,
                k,
                layer,
                Variant::Experimental,
                plus,
            ));
            out.push(ActivationRecord::contrastive(
                query_id,
                k,
                layer,
                Variant::Reference,
                minus,
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub mean: f64,
    pub std: f64,
}

/// Score populations for items sharing one first token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenClassMixture {
    /// Items whose first token matches the label.
    pub correct: Population,
    pub incorrect: Population,
    /// Fraction of the class that is correct.
    pub correct_weight: f64,
}

impl TokenClassMixture {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.correct_weight > 0.0 && self.correct_weight < 1.0) {
            return Err(SynthError::InvalidSpec(format!(
                "{name}: correct_weight {} not in (0, 1)",
                self.correct_weight
            )));
        }
        for p in [self.correct, self.incorrect] {
            if p.std.is_nan() || p.std <= 0.0 || !p.mean.is_finite() {
                return Err(SynthError::InvalidSpec(format!(
                    "{name}: populations need finite means and std > 0"
                )));
            }
        }
        Ok(())
    }
}

/// Scored items drawn from per-token-class Gaussian mixtures. Class sizes are
/// exact: `round(n * yes_token_weight)` Yes-token items, of which
/// `round(count * correct_weight)` are correct (likewise for No).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub yes_token: TokenClassMixture,
    pub no_token: TokenClassMixture,
    pub yes_token_weight: f64,
    pub n: usize,
    pub seed: u64,
}

impl MixtureSpec {
    /// Correct tokens score high on the Yes side and low on the No side,
    /// with a visible gap to the incorrect ones.
    pub fn example(n: usize, seed: u64) -> Self {
        Self {
            yes_token: TokenClassMixture {
                correct: Population {
                    mean: 1.0,
                    std: 0.5,
                },
                incorrect: Population {
                    mean: -0.5,
                    std: 0.6,
                },
                correct_weight: 0.7,
            },
            no_token: TokenClassMixture {
                correct: Population {
                    mean: -1.0,
                    std: 0.5,
                },
                incorrect: Population {
                    mean: 0.5,
                    std: 0.6,
                },
                correct_weight: 0.7,
            },
            yes_token_weight: 0.5,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.yes_token.validate("yes_token")?;
        self.no_token.validate("no_token")?;
        if !(self.yes_token_weight > 0.0 && self.yes_token_weight < 1.0) {
            return Err(SynthError::InvalidSpec(format!(
                "yes_token_weight {} not in (0, 1)",
                self.yes_token_weight
            )));
        }
        if self.n == 0 {
            return Err(SynthError::InvalidSpec("n must be positive".into()));
        }
        Ok(())
    }

    fn class_sizes(&self) -> [(Answer, usize, usize); 2] {
        let n_yes = (self.n as f64 * self.yes_token_weight).round() as usize;
        let n_no = self.n - n_yes;
        let split = |count: usize, w: f64| {
            let c = (count as f64 * w).round() as usize;
            (c, count - c)
        };
        let (yc, yi) = split(n_yes, self.yes_token.correct_weight);
        let (nc, ni) = split(n_no, self.no_token.correct_weight);
        [(Answer::Yes, yc, yi), (Answer::No, nc, ni)]
    }
}

/// Best single-threshold policy on the generating densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesOracle {
    #[serde(with = "threshold_serde")]
    pub l_yes: f64,
    #[serde(with = "threshold_serde")]
    pub l_no: f64,
    pub yes_accuracy: f64,
    pub no_accuracy: f64,
    /// Class-weighted accuracy.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureData {
    pub items: Vec<ScoredItem>,
    pub bayes: BayesOracle,
}

const BAYES_GRID_POINTS: usize = 200_001;
const BAYES_SPAN_STDS: f64 = 10.0;

fn cdf(p: Population, x: f64) -> f64 {
    Normal::new(p.mean, p.std)
        .expect("validated population")
        .cdf(x)
}

/// Accuracy within the Yes-token class of "stay Yes iff score >= l".
pub fn yes_class_accuracy(m: &TokenClassMixture, l: f64) -> f64 {
    let w = m.correct_weight;
    w * (1.0 - cdf(m.correct, l)) + (1.0 - w) * cdf(m.incorrect, l)
}

/// Accuracy within the No-token class of "stay No iff score <= l".
pub fn no_class_accuracy(m: &TokenClassMixture, l: f64) -> f64 {
    let w = m.correct_weight;
    w * cdf(m.correct, l) + (1.0 - w) * (1.0 - cdf(m.incorrect, l))
}

/// Maximizes `acc` over a uniform grid spanning both populations, refines
/// around the best grid point by golden-section search, and compares against
/// the `-inf`/`+inf` sentinels. `prefer` is the sentinel kept on ties.
fn optimize_threshold(m: &TokenClassMixture, acc: impl Fn(f64) -> f64, prefer: f64) -> (f64, f64) {
    let lo = (m.correct.mean - BAYES_SPAN_STDS * m.correct.std)
        .min(m.incorrect.mean - BAYES_SPAN_STDS * m.incorrect.std);
    let hi = (m.correct.mean + BAYES_SPAN_STDS * m.correct.std)
        .max(m.incorrect.mean + BAYES_SPAN_STDS * m.incorrect.std);
    let step = (hi - lo) / (BAYES_GRID_POINTS - 1) as f64;
    let mut best = (prefer, acc(prefer));
    let other = -prefer;
    let other_acc = acc(other);
    if other_acc > best.1 {
        best = (other, other_acc);
    }
    let mut grid_best = (lo, f64::NEG_INFINITY);
    for i in 0..BAYES_GRID_POINTS {
        let x = lo + step * i as f64;
        let a = acc(x);
        if a > grid_best.1 {
            grid_best = (x, a);
        }
    }
    // golden-section refinement inside the bracketing grid cells
    let (mut a, mut b) = (grid_best.0 - step, grid_best.0 + step);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if acc(c) >= acc(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let refined = ((a + b) / 2.0, acc((a + b) / 2.0));
    let interior = if refined.1 >= grid_best.1 {
        refined
    } else {
        grid_best
    };
    if interior.1 > best.1 {
        best = interior;
    }
    best
}

/// Best thresholds and accuracy on the generating densities.
pub fn bayes_oracle(spec: &MixtureSpec) -> Result<BayesOracle> {
    spec.validate()?;
    let (l_yes, yes_accuracy) = optimize_threshold(
        &spec.yes_token,
        |l| yes_class_accuracy(&spec.yes_token, l),
        f64::NEG_INFINITY,
    );
    let (l_no, no_accuracy) = optimize_threshold(
        &spec.no_token,
        |l| no_class_accuracy(&spec.no_token, l),
        f64::INFINITY,
    );
    let [(_, yc, yi), (_, nc, ni)] = spec.class_sizes();
    let (n_yes, n_no) = ((yc + yi) as f64, (nc + ni) as f64);
    Ok(BayesOracle {
        l_yes,
        l_no,
        yes_accuracy,
        no_accuracy,
        accuracy: (n_yes * yes_accuracy + n_no * no_accuracy) / (n_yes + n_no),
    })
}

/// Uniform on the open interval `(0, 1)`.
fn open_unit(rng: &mut SeededRng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Draws the items (shuffled, ids `0..n`) and computes the Bayes oracle.
///
/// Scores are stratified: the `j`-th of `c` draws from a population takes a
/// uniform point in the `j`-th of `c` equal-probability strata and maps it
/// through the inverse CDF, so the sample's empirical distribution stays
/// within `1/c` of the generating one.
///
/// Each item also carries first-token probabilities: a Yes-score drawn
/// uniformly from `[0.5, 1)` for Yes tokens and `[0, 0.5)` for No tokens,
/// independent of correctness, with `p_yes + p_no = 0.9`.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<MixtureData> {
    let bayes = bayes_oracle(spec)?;
    let mut rng = SeededRng::new(spec.seed);
    let mut items = Vec::with_capacity(spec.n);
    for (token, n_correct, n_incorrect) in spec.class_sizes() {
        let mix = match token {
            Answer::Yes => spec.yes_token,
            Answer::No => spec.no_token,
        };
        for (count, pop, correct) in [
            (n_correct, mix.correct, true),
            (n_incorrect, mix.incorrect, false),
        ] {
            let normal = Normal::new(pop.mean, pop.std).expect("validated population");
            for j in 0..count {
                let score = normal.inverse_cdf((j as f64 + open_unit(&mut rng)) / count as f64);
                let ys = match token {
                    Answer::Yes => 0.5 + 0.5 * rng.uniform(),
                    Answer::No => 0.5 * rng.uniform(),
                };
                items.push(ScoredItem {
                    item_id: 0,
                    first_token: FirstToken::from(token),
                    meta_score: Some(score),
                    p_yes: 0.9 * ys,
                    p_no: 0.9 * (1.0 - ys),
                    label: if correct { token } else { token.flip() },
                });
            }
        }
    }
    rng.shuffle(&mut items);
    for (i, item) in items.iter_mut().enumerate() {
        item.item_id = i as u64;
    }
    Ok(MixtureData { items, bayes })
}

/// Minimal single-turn benchmark entries matching synthetic items one to one.
pub fn synthetic_benchmark(
    items: &[ScoredItem],
    suite: Suite,
    context_mode: ContextMode,
) -> Vec<BenchmarkItem> {
    let task = match suite {
        Suite::MeCaRAG => Task::Rag,
        _ => Task::Tool(1),
    };
    items
        .iter()
        .map(|s| BenchmarkItem {
            item_id: s.item_id,
            suite,
            task,
            category: match s.label {
                Answer::Yes => Category::Positive,
                Answer::No => Category::Negative,
            },
            context_mode,
            turns: vec![Turn {
                speaker: Speaker::User,
                text: format!("synthetic query {}", s.item_id),
            }],
            provided_tools: Vec::new(),
            label: s.label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_differences_are_the_signal() {
        let mut spec = PlantedSpec::with_random_direction(16, 20, 2.0, 0.0, 4);
        spec.layers = vec![0, 1];
        let records = generate_planted(&spec).unwrap();
        assert_eq!(records.len(), 80);
        for pair in records.chunks(2) {
            let (p, m) = (&pair[0], &pair[1]);
            assert_eq!(p.variant, Variant::Experimental);
            assert_eq!(m.variant, Variant::Reference);
            for ((a, b), u) in p.vector.iter().zip(&m.vector).zip(&spec.direction) {
                let diff = f64::from(*a) - f64::from(*b);
                // exact up to the f32 storage rounding of each arm
                let tol = 2.0 * f64::from(f32::EPSILON) * (f64::from(a.abs()) + f64::from(b.abs()));
                assert!((diff - 2.0 * u).abs() <= tol, "{diff} vs {}", 2.0 * u);
            }
        }
    }

    #[test]
    fn planted_is_deterministic() {
        let spec = PlantedSpec::with_random_direction(8, 10, 1.0, 0.1, 99);
        assert_eq!(
            generate_planted(&spec).unwrap(),
            generate_planted(&spec).unwrap()
        );
        let other = PlantedSpec {
            seed: 100,
            ..spec.clone()
        };
        assert_ne!(
            generate_planted(&spec).unwrap(),
            generate_planted(&other).unwrap()
        );
    }

    #[test]
    fn truncation_numbering() {
        let mut spec = PlantedSpec::with_random_direction(2, 6, 1.0, 0.1, 1);
        spec.truncations_per_query = 3;
        let keys: Vec<(u64, u32)> = generate_planted(&spec)
            .unwrap()
            .iter()
            .step_by(2)
            .map(|r| (r.query_id, r.truncation_index))
            .collect();
        assert_eq!(keys, vec![(0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3)]);
    }

    #[test]
    fn invalid_planted_specs() {
        let good = PlantedSpec::with_random_direction(4, 4, 1.0, 0.1, 1);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.direction[0] += 0.1;
        assert!(bad.validate().is_err());
        let bad = PlantedSpec {
            signal: 0.0,
            ..good.clone()
        };
        assert!(bad.validate().is_err());
        let bad = PlantedSpec {
            noise: -1.0,
            ..good
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mixture_counts_are_exact() {
        let spec = MixtureSpec::example(1000, 3);
        let data = generate_mixture(&spec).unwrap();
        assert_eq!(data.items.len(), 1000);
        let yes_tokens = data
            .items
            .iter()
            .filter(|i| i.first_token == FirstToken::Yes)
            .count();
        assert_eq!(yes_tokens, 500);
        let yes_correct = data
            .items
            .iter()
            .filter(|i| i.first_token == FirstToken::Yes && i.label == Answer::Yes)
            .count();
        assert_eq!(yes_correct, 350);
        for item in &data.items {
            item.validate().unwrap();
        }
    }

    #[test]
    fn separated_populations_are_perfect() {
        let spec = MixtureSpec {
            yes_token: TokenClassMixture {
                correct: Population {
                    mean: 5.0,
                    std: 0.1,
                },
                incorrect: Population {
                    mean: -5.0,
                    std: 0.1,
                },
                correct_weight: 0.6,
            },
            no_token: TokenClassMixture {
                correct: Population {
                    mean: -5.0,
                    std: 0.1,
                },
                incorrect: Population {
                    mean: 5.0,
                    std: 0.1,
                },
                correct_weight: 0.6,
            },
            yes_token_weight: 0.5,
            n: 200,
            seed: 1,
        };
        let bayes = bayes_oracle(&spec).unwrap();
        assert!((bayes.accuracy - 1.0).abs() < 1e-12);
        assert!(bayes.l_yes > -5.0 && bayes.l_yes < 5.0);
    }

    #[test]
    fn uninformative_scores_give_majority_rate() {
        let same = Population {
            mean: 0.0,
            std: 1.0,
        };
        let spec = MixtureSpec {
            yes_token: TokenClassMixture {
                correct: same,
                incorrect: same,
                correct_weight: 0.7,
            },
            no_token: TokenClassMixture {
                correct: same,
                incorrect: same,
                correct_weight: 0.4,
            },
            yes_token_weight: 0.5,
            n: 100,
            seed: 1,
        };
        let bayes = bayes_oracle(&spec).unwrap();
        assert_eq!(bayes.l_yes, f64::NEG_INFINITY);
        assert!((bayes.yes_accuracy - 0.7).abs() < 1e-12);
        // flipping every No beats trusting it
        assert_eq!(bayes.l_no, f64::NEG_INFINITY);
        assert!((bayes.no_accuracy - 0.6).abs() < 1e-12);
    }

    #[test]
    fn equal_variance_threshold_is_the_crossing() {
        // equal weights and stds: densities cross at the midpoint of the means
        let spec = MixtureSpec {
            yes_token: TokenClassMixture {
                correct: Population {
                    mean: 1.0,
                    std: 0.7,
                },
                incorrect: Population {
                    mean: -0.4,
                    std: 0.7,
                },
                correct_weight: 0.5,
            },
            no_token: TokenClassMixture {
                correct: Population {
                    mean: -1.0,
                    std: 0.7,
                },
                incorrect: Population {
                    mean: 0.6,
                    std: 0.7,
                },
                correct_weight: 0.5,
            },
            yes_token_weight: 0.5,
            n: 10,
            seed: 0,
        };
        let bayes = bayes_oracle(&spec).unwrap();
        assert!((bayes.l_yes - 0.3).abs() < 1e-6, "{}", bayes.l_yes);
        assert!((bayes.l_no + 0.2).abs() < 1e-6, "{}", bayes.l_no);
    }

    #[test]
    fn oracle_json_encodes_sentinels() {
        let b = BayesOracle {
            l_yes: f64::NEG_INFINITY,
            l_no: 0.25,
            yes_accuracy: 0.7,
            no_accuracy: 0.8,
            accuracy: 0.75,
        };
        let json = serde_json::to_string(&b).unwrap();
        assert!(json.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<BayesOracle>(&json).unwrap(), b);
    }

    #[test]
    fn benchmark_mirrors_items() {
        let data = generate_mixture(&MixtureSpec::example(20, 1)).unwrap();
        let bench = synthetic_benchmark(&data.items, Suite::Metatool, ContextMode::WithoutContext);
        assert!(bench.iter().all(|b| b.check().is_empty()));
        assert!(bench
            .iter()
            .zip(&data.items)
            .all(|(b, s)| b.item_id == s.item_id && b.label == s.label));
    }
}
