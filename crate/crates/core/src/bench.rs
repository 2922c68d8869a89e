//! Synthetic open-set benchmarks.
//!
//! Genuine samples come from a compact Gaussian mixture near the origin.
//! Every attack class gets its own displaced and broader Gaussian, and each
//! domain shifts all of its samples by a fixed offset. Splits are stratified
//! per class and interleaved across domains.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{Label, PaiType, Sample, Split};
use crate::{seeded_rng, Error, Result, RngStream};

pub const GENERATOR: &str = concat!("metricpad-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenuineSpec {
    pub components: usize,
    pub count: usize,
    /// Standard deviation around each component mean.
    pub spread: f64,
    /// Distance of the component means from the origin.
    pub center_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackClassSpec {
    pub pai_type: PaiType,
    pub pai_subtype: String,
    /// Distance of the class mean from the origin.
    pub mean_scale: f64,
    /// Standard deviation around the class mean.
    pub cov_scale: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub tag: String,
    pub offset_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    #[serde(default)]
    pub seed: u64,
    pub input_dim: usize,
    pub genuine: GenuineSpec,
    pub attacks: Vec<AttackClassSpec>,
    pub domains: Vec<DomainSpec>,
    pub splits: SplitFractions,
}

impl BenchmarkSpec {
    /// The default desk-scale benchmark: 8 input dimensions, a two-component
    /// genuine mixture of 2,000 samples, all nine leaf attack classes with 300
    /// samples each, three domains and a 50/20/30 split.
    ///
    /// Higher-quality instruments sit closer to the genuine mixture.
    pub fn grandtest_toy(seed: u64) -> Self {
        let mut attacks = Vec::new();
        for t in PaiType::ALL {
            for (k, sub) in t.subtypes().iter().enumerate() {
                attacks.push(AttackClassSpec {
                    pai_type: t,
                    pai_subtype: sub.to_string(),
                    mean_scale: 3.0 - 0.4 * k as f64,
                    cov_scale: 0.6 + 0.1 * k as f64,
                    count: 300,
                });
            }
        }
        BenchmarkSpec {
            seed,
            input_dim: 8,
            genuine: GenuineSpec {
                components: 2,
                count: 2000,
                spread: 0.35,
                center_scale: 1.0,
            },
            attacks,
            domains: ["domain-a", "domain-b", "domain-c"]
                .iter()
                .map(|t| DomainSpec {
                    tag: t.to_string(),
                    offset_scale: 0.3,
                })
                .collect(),
            splits: SplitFractions {
                train: 0.5,
                dev: 0.2,
                test: 0.3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        let f = self.splits.as_array();
        if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) || libm::fabs(f.iter().sum::<f64>() - 1.0) > 1e-9 {
            return bad(format!("split fractions must be positive and sum to 1, got {f:?}"));
        }
        if self.genuine.components == 0 || self.genuine.count == 0 {
            return bad("genuine components and count must be positive".into());
        }
        if self.attacks.is_empty() {
            return bad("at least one attack class is required".into());
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        let scales = [self.genuine.spread, self.genuine.center_scale]
            .into_iter()
            .chain(self.attacks.iter().flat_map(|a| [a.mean_scale, a.cov_scale]))
            .chain(self.domains.iter().map(|d| d.offset_scale));
        if scales.into_iter().any(|s| !(s.is_finite() && s >= 0.0)) {
            return bad("scales must be finite and non-negative".into());
        }
        for a in &self.attacks {
            if a.count == 0 {
                return bad(format!("attack class {}/{} has zero samples", a.pai_type, a.pai_subtype));
            }
            Label::attack(a.pai_type, &a.pai_subtype)?;
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|o| o.tag == d.tag) {
                return bad(format!("duplicate domain tag {}", d.tag));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub samples: Vec<Sample>,
    /// `None` for ingested data.
    pub spec: Option<BenchmarkSpec>,
    pub provenance: Provenance,
}

impl Benchmark {
    /// Wraps externally produced samples, checking ids, dimensions and labels.
    pub fn from_samples(samples: Vec<Sample>, generator: &str) -> Result<Self> {
        let dim = samples.first().ok_or(Error::EmptyBatch)?.features.len();
        let mut ids: Vec<&str> = Vec::with_capacity(samples.len());
        for s in &samples {
            s.validate(dim)?;
            ids.push(&s.id);
        }
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidLabel(format!("duplicate sample id {}", w[0])));
        }
        Ok(Benchmark {
            samples,
            spec: None,
            provenance: Provenance {
                generator: generator.to_string(),
                seed: None,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    /// Checks that train and dev each hold genuine samples and attacks.
    pub fn check_split_presence(&self) -> Result<()> {
        for split in [Split::Train, Split::Dev] {
            let mut genuine = false;
            let mut attack = false;
            for s in self.samples.iter().filter(|s| s.split == split) {
                genuine |= s.label.is_genuine();
                attack |= !s.label.is_genuine();
            }
            if !(genuine && attack) {
                return Err(Error::InsufficientSamples {
                    what: format!("{split} classes (genuine and attack required)"),
                    required: 2,
                    available: usize::from(genuine) + usize::from(attack),
                });
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn direction<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-9 {
            return v.into_iter().map(|x| scale * x / n).collect();
        }
    }
}

/// Per-split quotas by largest remainder, ties going to the earlier split.
fn split_targets(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut t = exact.map(|e| libm::floor(e) as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - t[b] as f64).total_cmp(&(exact[a] - t[a] as f64)).then(a.cmp(&b)));
    let mut left = n - t.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        t[k] += 1;
        left -= 1;
    }
    t
}

/// Split sequence for `n` samples of one class: each position goes to the
/// split furthest behind its proportional share.
fn split_schedule(n: usize, fractions: [f64; 3]) -> Vec<Split> {
    let targets = split_targets(n, fractions);
    let splits = [Split::Train, Split::Dev, Split::Test];
    let mut used = [0usize; 3];
    (0..n)
        .map(|k| {
            let pick = (0..3)
                .filter(|&s| used[s] < targets[s])
                .max_by(|&a, &b| {
                    let da = targets[a] as f64 * (k + 1) as f64 / n as f64 - used[a] as f64;
                    let db = targets[b] as f64 * (k + 1) as f64 / n as f64 - used[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("targets sum to n");
            used[pick] += 1;
            splits[pick]
        })
        .collect()
}

/// Draws a benchmark. The same spec always yields the same samples.
pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let dim = spec.input_dim;
    let mut rng = seeded_rng(spec.seed, RngStream::Benchmark);
    let components: Vec<Vec<f64>> = (0..spec.genuine.components)
        .map(|_| direction(&mut rng, dim, spec.genuine.center_scale))
        .collect();
    let attack_means: Vec<Vec<f64>> = spec
        .attacks
        .iter()
        .map(|a| direction(&mut rng, dim, a.mean_scale))
        .collect();
    let offsets: Vec<Vec<f64>> = spec
        .domains
        .iter()
        .map(|d| direction(&mut rng, dim, d.offset_scale))
        .collect();
    let fractions = spec.splits.as_array();

    let mut samples = Vec::with_capacity(spec.genuine.count + spec.attacks.iter().map(|a| a.count).sum::<usize>());
    let mut emit = |rng: &mut _, prefix: &str, label: Label, count: usize, mean_of: &dyn Fn(usize) -> (usize, f64)| {
        let schedule = split_schedule(count, fractions);
        for (k, split) in schedule.into_iter().enumerate() {
            let (m, sd) = mean_of(k);
            let mean = if label.is_genuine() { &components[m] } else { &attack_means[m] };
            let domain = k % spec.domains.len();
            let noise = gaussian(rng, dim);
            let features = (0..dim).map(|j| mean[j] + sd * noise[j] + offsets[domain][j]).collect();
            samples.push(Sample {
                id: format!("{prefix}-{k:05}"),
                features,
                label: label.clone(),
                domain_tag: spec.domains[domain].tag.clone(),
                split,
            });
        }
    };
    let g = &spec.genuine;
    emit(&mut rng, "genuine", Label::Genuine, g.count, &|k| (k % g.components, g.spread));
    for (c, a) in spec.attacks.iter().enumerate() {
        let label = Label::attack(a.pai_type, &a.pai_subtype)?;
        let prefix = format!("{}-{}", a.pai_type, a.pai_subtype);
        emit(&mut rng, &prefix, label, a.count, &|_| (c, a.cov_scale));
    }
    Ok(Benchmark {
        samples,
        spec: Some(spec.clone()),
        provenance: Provenance {
            generator: GENERATOR.to_string(),
            seed: Some(spec.seed),
        },
    })
}
