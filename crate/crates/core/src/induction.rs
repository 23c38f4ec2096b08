//! Induction-generating distributions.
//!
//! An induction sample is the per-destination package-count vector for one
//! step. Counts follow a multinomial law whose category probabilities come
//! either from a discretised, truncated normal over destination indices or
//! from an explicit probability vector. A [`GroupSet`] is the finite family
//! of such laws spanning the group ambiguity set; convex combinations of its
//! members are available through [`mixture_distribution`].

use std::f64::consts::SQRT_2;
use std::fmt;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Tolerance for the simplex checks on probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Standard normal CDF.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `1 - standard_normal_cdf(x)` without cancellation for large `x`.
fn standard_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Normal mass on `[a, b]`, evaluated on whichever tail avoids cancellation.
fn normal_mass(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    if a >= 0.0 {
        standard_normal_sf(a) - standard_normal_sf(b)
    } else if b <= 0.0 {
        standard_normal_cdf(b) - standard_normal_cdf(a)
    } else {
        1.0 - standard_normal_sf(b) - standard_normal_cdf(a)
    }
}

/// Normal law over destination indices, discretised onto unit cells and
/// truncated to `[0, N]`. Destination `i` (1-based) owns the cell `[i-1, i]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormalSpec {
    pub mu: f64,
    pub sigma: f64,
    pub n_destinations: usize,
}

impl TruncatedNormalSpec {
    pub fn new(mu: f64, sigma: f64, n_destinations: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidDistribution(format!("sigma must be positive, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidDistribution(format!("mu must be finite, got {mu}")));
        }
        if n_destinations == 0 {
            return Err(Error::InvalidDistribution("need at least one destination".into()));
        }
        Ok(Self { mu, sigma, n_destinations })
    }

    pub fn probs(&self) -> Result<Vec<f64>> {
        truncated_normal_probs(self)
    }
}

/// Per-destination assignment probabilities of a truncated normal.
pub fn truncated_normal_probs(spec: &TruncatedNormalSpec) -> Result<Vec<f64>> {
    let TruncatedNormalSpec { mu, sigma, n_destinations: n } = *spec;
    let z = |x: f64| (x - mu) / sigma;
    let denom = normal_mass(z(0.0), z(n as f64));
    if denom.abs() < 1e-300 || !denom.is_finite() {
        return Err(Error::DegenerateTruncation);
    }
    Ok((1..=n)
        .map(|i| normal_mass(z(i as f64 - 1.0), z(i as f64)) / denom)
        .collect())
}

/// Multinomial law over `k` categories with a fixed total volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialSpec {
    pub volume: u64,
    pub probs: Vec<f64>,
}

impl MultinomialSpec {
    pub fn new(volume: u64, probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs).map_err(Error::InvalidDistribution)?;
        Ok(Self { volume, probs })
    }

    pub fn categories(&self) -> usize {
        self.probs.len()
    }
}

fn check_simplex(p: &[f64]) -> std::result::Result<(), String> {
    if p.is_empty() {
        return Err("empty probability vector".into());
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(format!("entry {i} = {v} outside [0,1]"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("entries sum to {s}"));
    }
    Ok(())
}

/// Package counts per destination for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InductionSample {
    pub counts: Vec<u64>,
}

impl InductionSample {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Multinomial probability of `sample`, evaluated in log space.
pub fn multinomial_pmf(spec: &MultinomialSpec, sample: &InductionSample) -> Result<f64> {
    if sample.counts.len() != spec.probs.len() {
        return Err(Error::DimensionMismatch { expected: spec.probs.len(), got: sample.counts.len() });
    }
    let total = sample.total();
    if total != spec.volume {
        return Err(Error::SupportViolation { expected: spec.volume, got: total });
    }
    let mut log_p = ln_factorial(spec.volume);
    for (&z, &p) in sample.counts.iter().zip(&spec.probs) {
        if z == 0 {
            continue;
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += z as f64 * p.ln() - ln_factorial(z);
    }
    Ok(log_p.exp())
}

/// Draws one induction sample by sequential conditional binomials.
pub fn sample_induction<R: Rng + ?Sized>(spec: &MultinomialSpec, rng: &mut R) -> InductionSample {
    let k = spec.probs.len();
    let mut counts = vec![0u64; k];
    let mut tail = vec![0.0; k];
    let mut acc = 0.0;
    for i in (0..k).rev() {
        acc += spec.probs[i];
        tail[i] = acc;
    }
    let mut left = spec.volume;
    for i in 0..k {
        if left == 0 || tail[i] <= 0.0 {
            break;
        }
        let p = (spec.probs[i] / tail[i]).clamp(0.0, 1.0);
        let x = if p >= 1.0 {
            left
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(left, p).expect("p in (0,1)").sample(rng)
        };
        counts[i] = x;
        left -= x;
    }
    InductionSample { counts }
}

/// Pooled-frequency (sample average approximation) estimate.
pub fn estimate_saa(samples: &[InductionSample]) -> Result<MultinomialSpec> {
    let first = samples.first().ok_or(Error::EmptySamples)?;
    let k = first.counts.len();
    let volume = first.total();
    let mut pooled = vec![0u64; k];
    for s in samples {
        if s.counts.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: s.counts.len() });
        }
        if s.total() != volume {
            return Err(Error::SupportViolation { expected: volume, got: s.total() });
        }
        for (p, c) in pooled.iter_mut().zip(&s.counts) {
            *p += c;
        }
    }
    let grand: u64 = pooled.iter().sum();
    if grand == 0 {
        return Err(Error::InvalidDistribution("samples carry no packages".into()));
    }
    let probs = pooled.iter().map(|&c| c as f64 / grand as f64).collect();
    MultinomialSpec::new(volume, probs)
}

/// Group index. Stored 0-based; displayed and serialised 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(usize);

impl GroupId {
    pub fn from_index(index: usize) -> Self {
        Self(index)
    }

    pub fn from_number(number: usize) -> Option<Self> {
        number.checked_sub(1).map(Self)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn number(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for GroupId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.number() as u64)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let n = u64::deserialize(d)? as usize;
        GroupId::from_number(n).ok_or_else(|| serde::de::Error::custom("group numbers start at 1"))
    }
}

/// How a group was specified in a group-set document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum GroupSource {
    Normal { mu: f64, sigma: f64, n: usize, volume: u64 },
    Explicit { probs: Vec<f64>, volume: u64 },
}

impl GroupSource {
    fn resolve(&self) -> Result<MultinomialSpec> {
        match self {
            GroupSource::Normal { mu, sigma, n, volume } => {
                let probs = TruncatedNormalSpec::new(*mu, *sigma, *n)?.probs()?;
                MultinomialSpec::new(*volume, probs)
            }
            GroupSource::Explicit { probs, volume } => MultinomialSpec::new(*volume, probs.clone()),
        }
    }
}

/// Serialised form of a [`GroupSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSetDoc {
    pub kind: String,
    #[serde(default)]
    pub groups: Vec<GroupSource>,
}

/// Finite, ordered family of induction-generating distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSet {
    kind: String,
    sources: Vec<GroupSource>,
    specs: Vec<MultinomialSpec>,
}

pub const STANDARD_MEANS: [f64; 9] = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];
pub const STANDARD_SIGMA: f64 = 2.0;
pub const STANDARD_DESTINATIONS: usize = 20;
pub const STANDARD_VOLUME: u64 = 1200;

impl GroupSet {
    /// Nine truncated normals with means -4..=4, sigma 2, over 20 destinations,
    /// 1200 packages per step.
    pub fn standard() -> Self {
        let sources = STANDARD_MEANS
            .iter()
            .map(|&mu| GroupSource::Normal {
                mu,
                sigma: STANDARD_SIGMA,
                n: STANDARD_DESTINATIONS,
                volume: STANDARD_VOLUME,
            })
            .collect();
        Self::from_sources("standard", sources).expect("preset is valid")
    }

    pub fn from_sources(kind: &str, sources: Vec<GroupSource>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidConfig("a group set needs at least one group".into()));
        }
        let specs = sources.iter().map(GroupSource::resolve).collect::<Result<Vec<_>>>()?;
        let (k, v) = (specs[0].categories(), specs[0].volume);
        for (g, s) in specs.iter().enumerate() {
            if s.categories() != k || s.volume != v {
                return Err(Error::InvalidConfig(format!(
                    "group {} has {} categories / volume {}, group 1 has {k} / {v}",
                    g + 1,
                    s.categories(),
                    s.volume
                )));
            }
        }
        Ok(Self { kind: kind.to_string(), sources, specs })
    }

    /// Keeps only the listed groups, renumbered densely in the given order.
    pub fn subset(&self, ids: &[GroupId]) -> Result<Self> {
        let sources = ids
            .iter()
            .map(|g| self.sources.get(g.index()).cloned().ok_or_else(|| unknown_group(*g, self.len())))
            .collect::<Result<Vec<_>>>()?;
        Self::from_sources(&self.kind, sources)
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn categories(&self) -> usize {
        self.specs[0].categories()
    }

    pub fn volume(&self) -> u64 {
        self.specs[0].volume
    }

    pub fn ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        (0..self.len()).map(GroupId)
    }

    pub fn get(&self, g: GroupId) -> Result<&MultinomialSpec> {
        self.specs.get(g.index()).ok_or_else(|| unknown_group(g, self.len()))
    }

    pub fn spec(&self, g: GroupId) -> &MultinomialSpec {
        &self.specs[g.index()]
    }

    pub fn probs(&self, g: GroupId) -> &[f64] {
        &self.specs[g.index()].probs
    }

    pub fn sources(&self) -> &[GroupSource] {
        &self.sources
    }

    pub fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> GroupId {
        GroupId(rng.random_range(0..self.len()))
    }

    pub fn to_doc(&self) -> GroupSetDoc {
        GroupSetDoc { kind: self.kind.clone(), groups: self.sources.clone() }
    }

    pub fn from_doc(doc: &GroupSetDoc) -> Result<Self> {
        if doc.groups.is_empty() {
            return build_group_set(&doc.kind, &[]);
        }
        Self::from_sources(&doc.kind, doc.groups.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: GroupSetDoc = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::InvalidConfig(format!("group set at `{}`: {}", e.path(), e.inner())))?;
        Self::from_doc(&doc)
    }
}

fn unknown_group(g: GroupId, m: usize) -> Error {
    Error::InvalidConfig(format!("group {g} does not exist (m = {m})"))
}

/// Builds a group set by kind: `standard` (no parameters) or `custom`.
pub fn build_group_set(kind: &str, params: &[GroupSource]) -> Result<GroupSet> {
    match kind {
        "standard" if params.is_empty() => Ok(GroupSet::standard()),
        "standard" => Err(Error::InvalidConfig("standard takes no group parameters".into())),
        "custom" => GroupSet::from_sources(kind, params.to_vec()),
        other => Err(Error::UnknownGroupKind(other.to_string())),
    }
}

/// Category probabilities of the mixture `sum_g q_g P_g`.
pub fn mixture_distribution(groups: &GroupSet, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != groups.len() {
        return Err(Error::DimensionMismatch { expected: groups.len(), got: q.len() });
    }
    check_simplex(q).map_err(Error::NotOnSimplex)?;
    let mut support = q.iter().enumerate().filter(|(_, w)| **w != 0.0);
    if let (Some((g, _)), None) = (support.next(), support.next()) {
        return Ok(groups.specs[g].probs.clone());
    }
    let mut out = vec![0.0; groups.categories()];
    for (w, spec) in q.iter().zip(&groups.specs) {
        for (o, p) in out.iter_mut().zip(&spec.probs) {
            *o += w * p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seeder;

    fn spec(volume: u64, probs: &[f64]) -> MultinomialSpec {
        MultinomialSpec::new(volume, probs.to_vec()).unwrap()
    }

    #[test]
    fn first_cell_for_half_normal() {
        let p = TruncatedNormalSpec::new(0.0, 2.0, 20).unwrap().probs().unwrap();
        // (Phi(0.5) - Phi(0)) / (Phi(10) - Phi(0))
        assert!((p[0] - 0.382_924_922_548_026_2).abs() < 1e-9);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn left_shifted_mean_is_monotone() {
        let p = TruncatedNormalSpec::new(-4.0, 2.0, 20).unwrap().probs().unwrap();
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn degenerate_truncation_is_rejected() {
        let err = TruncatedNormalSpec::new(1e4, 1.0, 20).unwrap().probs().unwrap_err();
        assert_eq!(err.to_string(), "distribution mass entirely outside [0,N]");
        assert!(TruncatedNormalSpec::new(0.0, 0.0, 20).is_err());
    }

    #[test]
    fn pmf_small_cases() {
        let s = spec(2, &[0.5, 0.5]);
        assert!((multinomial_pmf(&s, &InductionSample::new(vec![1, 1])).unwrap() - 0.5).abs() < 1e-15);
        let d = spec(3, &[1.0, 0.0]);
        assert_eq!(multinomial_pmf(&d, &InductionSample::new(vec![3, 0])).unwrap(), 1.0);
        assert_eq!(multinomial_pmf(&d, &InductionSample::new(vec![2, 1])).unwrap(), 0.0);
        let err = multinomial_pmf(&s, &InductionSample::new(vec![2, 1])).unwrap_err();
        assert!(err.to_string().starts_with("support violation"));
    }

    #[test]
    fn pmf_sums_to_one_on_support() {
        let s = spec(4, &[0.2, 0.3, 0.5]);
        let mut total = 0.0;
        for a in 0..=4u64 {
            for b in 0..=(4 - a) {
                total += multinomial_pmf(&s, &InductionSample::new(vec![a, b, 4 - a - b])).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sampling_degenerate_and_empty() {
        let mut rng = Seeder::new(0).rng();
        assert_eq!(sample_induction(&spec(0, &[0.3, 0.7]), &mut rng).counts, vec![0, 0]);
        let d = spec(7, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(sample_induction(&d, &mut rng).counts, vec![7, 0, 0, 0]);
        let tail = spec(5, &[0.0, 0.0, 1.0]);
        assert_eq!(sample_induction(&tail, &mut rng).counts, vec![0, 0, 5]);
    }

    #[test]
    fn saa_pooling() {
        let one = estimate_saa(&[InductionSample::new(vec![3, 1, 0])]).unwrap();
        assert_eq!(one.probs, vec![0.75, 0.25, 0.0]);
        assert_eq!(one.volume, 4);
        let two = estimate_saa(&[InductionSample::new(vec![2, 2]), InductionSample::new(vec![4, 0])]).unwrap();
        assert_eq!(two.probs, vec![0.75, 0.25]);
        assert!(matches!(estimate_saa(&[]), Err(Error::EmptySamples)));
        let bad = [InductionSample::new(vec![1, 1]), InductionSample::new(vec![1, 2])];
        assert!(estimate_saa(&bad).is_err());
    }

    #[test]
    fn standard_groups() {
        let gs = build_group_set("standard", &[]).unwrap();
        assert_eq!(gs.len(), 9);
        assert_eq!(gs.volume(), 1200);
        assert_eq!(gs.categories(), 20);
        for (g, src) in gs.sources().iter().enumerate() {
            match src {
                GroupSource::Normal { mu, sigma, .. } => {
                    assert_eq!(*mu, g as f64 - 4.0);
                    assert_eq!(*sigma, 2.0);
                }
                _ => panic!("expected normal groups"),
            }
            check_simplex(gs.probs(GroupId(g))).unwrap();
        }
        assert!(matches!(build_group_set("weekly", &[]), Err(Error::UnknownGroupKind(_))));
    }

    #[test]
    fn custom_single_group() {
        let src = GroupSource::Explicit { probs: vec![0.5, 0.5], volume: 10 };
        let gs = build_group_set("custom", &[src]).unwrap();
        assert_eq!(gs.len(), 1);
        let mismatched = [
            GroupSource::Explicit { probs: vec![0.5, 0.5], volume: 10 },
            GroupSource::Explicit { probs: vec![0.5, 0.5], volume: 11 },
        ];
        assert!(build_group_set("custom", &mismatched).is_err());
    }

    #[test]
    fn mixture_vertices_and_blends() {
        let gs = GroupSet::standard();
        let mut q = vec![0.0; 9];
        q[2] = 1.0;
        assert_eq!(mixture_distribution(&gs, &q).unwrap(), gs.probs(GroupId(2)));

        let two = GroupSet::from_sources(
            "custom",
            vec![
                GroupSource::Explicit { probs: vec![0.2, 0.8], volume: 4 },
                GroupSource::Explicit { probs: vec![0.6, 0.4], volume: 4 },
            ],
        )
        .unwrap();
        let mix = mixture_distribution(&two, &[0.25, 0.75]).unwrap();
        assert!((mix[0] - (0.25 * 0.2 + 0.75 * 0.6)).abs() < 1e-15);
        assert!((mix[1] - (0.25 * 0.8 + 0.75 * 0.4)).abs() < 1e-15);
        assert!(matches!(mixture_distribution(&two, &[0.5, 0.6]), Err(Error::NotOnSimplex(_))));
        assert!(mixture_distribution(&two, &[1.5, -0.5]).is_err());

        let same = GroupSet::from_sources(
            "custom",
            vec![
                GroupSource::Explicit { probs: vec![0.25, 0.75], volume: 4 },
                GroupSource::Explicit { probs: vec![0.25, 0.75], volume: 4 },
            ],
        )
        .unwrap();
        assert_eq!(mixture_distribution(&same, &[0.5, 0.5]).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn json_round_trip() {
        let gs = GroupSet::standard();
        let back = GroupSet::from_json(&gs.to_json().unwrap()).unwrap();
        assert_eq!(gs, back);
        let preset = GroupSet::from_json(r#"{"kind": "standard"}"#).unwrap();
        assert_eq!(preset, gs);
        let explicit = GroupSet::from_json(r#"{"kind":"custom","groups":[{"probs":[0.5,0.5],"volume":3}]}"#).unwrap();
        assert_eq!(explicit.volume(), 3);
        let err = GroupSet::from_json(r#"{"kind":"custom","groups":[{"probs":[0.5,0.5]}]}"#).unwrap_err();
        assert!(err.to_string().contains("groups"), "{err}");
    }

    #[test]
    fn group_ids_are_one_based_outside() {
        let g = GroupId::from_number(3).unwrap();
        assert_eq!(g.index(), 2);
        assert_eq!(g.to_string(), "3");
        assert_eq!(serde_json::to_string(&g).unwrap(), "3");
        assert!(serde_json::from_str::<GroupId>("0").is_err());
        assert!(GroupId::from_number(0).is_none());
    }
}
