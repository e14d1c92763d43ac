//! The set-based localization network and the fixed-input baseline.
//!
//! [`AdaPosModel`] encodes every CIR with one shared 1D-ResNet, adds the
//! embedding of the antenna it came from, mixes the set with transformer
//! encoder layers, mean-pools over the set and regresses a 2D chart
//! position. [`BaselineResNet`] stacks all antenna slots into one
//! `[a_max·3, taps]` input and zero-fills the absent ones.
//!
//! Both architectures evaluate batches of sets in one tape pass: `G` sets of
//! `N` CIRs are laid out as `G·N` rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, EmbeddingTable, EncoderLayer, SignalEncoder, SignalEncoderConfig};
use crate::sim::{CHANNELS, TAPS};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};

/// Antenna ids present at one step: nonempty, in range, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AntennaSubset {
    ids: Vec<usize>,
}

impl AntennaSubset {
    pub fn new(ids: Vec<usize>, a_max: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Validation("antenna subset is empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= a_max) {
            return Err(Error::AntennaId { id, a_max });
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "antenna subset {ids:?} is not strictly increasing"
            )));
        }
        Ok(Self { ids })
    }

    /// Sorts `ids` first; duplicates are still rejected.
    pub fn from_unsorted(mut ids: Vec<usize>, a_max: usize) -> Result<Self> {
        ids.sort_unstable();
        Self::new(ids, a_max)
    }

    pub fn full(a_max: usize) -> Self {
        assert!(a_max > 0);
        Self {
            ids: (0..a_max).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // exact at every step: acc · (n − i) is divisible by (i + 1)
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// `Σ_{k=n_min}^{n_max} C(a_max, k)`: the number of antenna subsets with a
/// size in `[n_min, n_max]`.
pub fn count_configurations(a_max: usize, n_min: usize, n_max: usize) -> Result<u64> {
    if !(1 <= n_min && n_min <= n_max && n_max <= a_max) {
        return Err(Error::Config(format!(
            "need 1 ≤ n_min ≤ n_max ≤ a_max, got n_min={n_min}, n_max={n_max}, a_max={a_max}"
        )));
    }
    Ok((n_min..=n_max).map(|k| binomial(a_max, k)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaPosConfig {
    pub a_max: usize,
    pub encoder: SignalEncoderConfig,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub head_hidden: usize,
}

impl AdaPosConfig {
    /// Full-size network: d=256, 8 heads, d_ff=1024, 3 encoder layers,
    /// head 256→128→2.
    pub fn full(a_max: usize) -> Self {
        Self {
            a_max,
            encoder: SignalEncoderConfig::standard(CHANNELS, 256),
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            layers: 3,
            head_hidden: 128,
        }
    }

    /// Reduced network sized for single-core desk runs.
    pub fn desk(a_max: usize) -> Self {
        Self {
            a_max,
            encoder: desk_encoder(CHANNELS, 32),
            d_model: 32,
            heads: 4,
            d_ff: 64,
            layers: 1,
            head_hidden: 32,
        }
    }

    /// Smallest network used by gradient checks.
    pub fn test(a_max: usize) -> Self {
        Self {
            a_max,
            encoder: SignalEncoderConfig {
                in_channels: CHANNELS,
                stem_channels: 4,
                block_channels: vec![4, 8],
                kernel_width: 3,
                taps: TAPS,
                embed_dim: 32,
            },
            d_model: 32,
            heads: 4,
            d_ff: 32,
            layers: 1,
            head_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_max < 1 {
            return Err(Error::Config("a_max must be at least 1".into()));
        }
        if self.encoder.in_channels != CHANNELS || self.encoder.taps != TAPS {
            return Err(Error::Config(format!(
                "encoder input must be {CHANNELS}×{TAPS}, got {}×{}",
                self.encoder.in_channels, self.encoder.taps
            )));
        }
        if self.encoder.embed_dim != self.d_model {
            return Err(Error::Config(format!(
                "encoder embed_dim {} must equal d_model {}",
                self.encoder.embed_dim, self.d_model
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.head_hidden == 0 {
            return Err(Error::Config("layers, d_ff and head_hidden must be positive".into()));
        }
        validate_encoder(&self.encoder)
    }
}

fn desk_encoder(in_channels: usize, embed_dim: usize) -> SignalEncoderConfig {
    SignalEncoderConfig {
        in_channels,
        stem_channels: 8,
        block_channels: vec![8, 16, 16],
        kernel_width: 3,
        taps: TAPS,
        embed_dim,
    }
}

fn validate_encoder(c: &SignalEncoderConfig) -> Result<()> {
    if c.kernel_width % 2 == 0 {
        return Err(Error::Config(format!(
            "encoder kernel_width must be odd, got {}",
            c.kernel_width
        )));
    }
    if c.stem_channels == 0 || c.block_channels.contains(&0) || c.embed_dim == 0 {
        return Err(Error::Config("encoder channel counts must be positive".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub a_max: usize,
    /// `in_channels` is `a_max · 3`.
    pub encoder: SignalEncoderConfig,
    pub head_hidden: usize,
}

impl BaselineConfig {
    /// Same block design as [`AdaPosConfig::full`], widened input.
    pub fn full(a_max: usize) -> Self {
        Self {
            a_max,
            encoder: SignalEncoderConfig::standard(a_max * CHANNELS, 256),
            head_hidden: 128,
        }
    }

    pub fn desk(a_max: usize) -> Self {
        Self {
            a_max,
            encoder: desk_encoder(a_max * CHANNELS, 32),
            head_hidden: 32,
        }
    }

    pub fn test(a_max: usize) -> Self {
        let mut encoder = AdaPosConfig::test(a_max).encoder;
        encoder.in_channels = a_max * CHANNELS;
        Self {
            a_max,
            encoder,
            head_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_max < 1 {
            return Err(Error::Config("a_max must be at least 1".into()));
        }
        if self.encoder.in_channels != self.a_max * CHANNELS || self.encoder.taps != TAPS {
            return Err(Error::Config(format!(
                "baseline input must be {}×{TAPS}, got {}×{}",
                self.a_max * CHANNELS,
                self.encoder.in_channels,
                self.encoder.taps
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        validate_encoder(&self.encoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    AdaPos,
    Baseline,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::AdaPos => "adapos",
            Architecture::Baseline => "baseline",
        })
    }
}

/// Topology of either architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
pub enum ModelSpec {
    AdaPos(AdaPosConfig),
    Baseline(BaselineConfig),
}

impl ModelSpec {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelSpec::AdaPos(_) => Architecture::AdaPos,
            ModelSpec::Baseline(_) => Architecture::Baseline,
        }
    }

    pub fn a_max(&self) -> usize {
        match self {
            ModelSpec::AdaPos(c) => c.a_max,
            ModelSpec::Baseline(c) => c.a_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::AdaPos(c) => c.validate(),
            ModelSpec::Baseline(c) => c.validate(),
        }
    }
}

fn check_taps(t: &Tensor) -> Result<()> {
    if t.shape() != [CHANNELS, TAPS] {
        return Err(Error::shape("cir taps", t.shape(), &[CHANNELS, TAPS]));
    }
    Ok(())
}

/// Two-layer MLP `d → hidden (ReLU) → 2`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

impl MlpHead {
    fn new(prefix: &str, d: usize, hidden: usize) -> Self {
        Self {
            hidden: DenseLayer::new(&format!("{prefix}.hidden"), d, hidden),
            out: DenseLayer::new(&format!("{prefix}.out"), hidden, 2),
        }
    }

    fn init(params: &mut ParamSet, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        DenseLayer::init(params, &format!("{prefix}.hidden"), d, hidden, rng)?;
        DenseLayer::init(params, &format!("{prefix}.out"), hidden, 2, rng)?;
        Ok(Self::new(prefix, d, hidden))
    }

    fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, bound, h)
    }
}

#[derive(Clone, Debug)]
pub struct AdaPosModel {
    pub config: AdaPosConfig,
    pub encoder: SignalEncoder,
    pub antenna_table: EmbeddingTable,
    pub combiner: Vec<EncoderLayer>,
    pub head: MlpHead,
}

impl AdaPosModel {
    pub fn init(config: &AdaPosConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        SignalEncoder::init(params, "encoder", &config.encoder, rng)?;
        EmbeddingTable::init(params, "antenna_table", config.a_max, config.d_model, rng)?;
        for i in 0..config.layers {
            EncoderLayer::init(
                params,
                &format!("combiner.{i}"),
                config.d_model,
                config.heads,
                config.d_ff,
                rng,
            )?;
        }
        MlpHead::init(params, "head", config.d_model, config.head_hidden, rng)?;
        Self::describe(config)
    }

    /// Descriptor for parameters created by [`AdaPosModel::init`].
    pub fn describe(config: &AdaPosConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: SignalEncoder::describe("encoder", &config.encoder),
            antenna_table: EmbeddingTable::new("antenna_table", config.a_max, config.d_model),
            combiner: (0..config.layers)
                .map(|i| {
                    EncoderLayer::new(&format!("combiner.{i}"), config.d_model, config.heads, config.d_ff)
                })
                .collect::<Result<_>>()?,
            head: MlpHead::new("head", config.d_model, config.head_hidden),
        })
    }

    /// Shared-encoder embeddings `[rows, d]` of CIRs stacked as `[rows, 3, taps]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bindings, taps: Var) -> Result<Var> {
        self.encoder.forward(tape, bound, taps)
    }

    /// Positions `[groups, 2]` for `groups` sets of `set_len` CIRs each.
    /// `taps` is `[groups · set_len, 3, taps]`; `ids[r]` labels row `r`.
    pub fn forward_sets(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        taps: Var,
        ids: &[usize],
        set_len: usize,
    ) -> Result<Var> {
        let rows = tape.shape(taps)[0];
        if ids.len() != rows || set_len == 0 || rows % set_len != 0 {
            return Err(Error::Validation(format!(
                "{rows} CIR rows do not match {} ids in sets of {set_len}",
                ids.len()
            )));
        }
        let groups = rows / set_len;
        let emb = self.antenna_table.lookup_sets(tape, bound, ids, set_len)?;
        let enc = self.encode(tape, bound, taps)?;
        let mut h = tape.add(enc, emb)?;
        for layer in &self.combiner {
            h = layer.forward(tape, bound, h, groups)?;
        }
        let h = tape.reshape(h, [groups, set_len, self.config.d_model])?;
        let pooled = tape.mean_axis(h, 1)?;
        self.head.forward(tape, bound, pooled)
    }
}

/// Position of one set of `(taps, antenna_id)` pairs. Output does not depend
/// on the order of `samples`.
pub fn adapos_forward(
    model: &AdaPosModel,
    params: &ParamSet,
    samples: &[(&Tensor, usize)],
) -> Result<[f64; 2]> {
    if samples.is_empty() {
        return Err(Error::Validation("adapos_forward needs at least one CIR".into()));
    }
    let ids: Vec<usize> = samples.iter().map(|s| s.1).collect();
    model.antenna_table.validate_ids(&ids)?;
    let mut data = Vec::with_capacity(samples.len() * CHANNELS * TAPS);
    for (taps, _) in samples {
        check_taps(taps)?;
        data.extend_from_slice(taps.data());
    }
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let x = tape.constant(Tensor::new([samples.len(), CHANNELS, TAPS], data)?);
    let out = model.forward_sets(&mut tape, &bound, x, &ids, samples.len())?;
    let v = tape.value(out).data();
    Ok([v[0], v[1]])
}

#[derive(Clone, Debug)]
pub struct BaselineResNet {
    pub config: BaselineConfig,
    pub encoder: SignalEncoder,
    pub head: MlpHead,
}

impl BaselineResNet {
    pub fn init(config: &BaselineConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        SignalEncoder::init(params, "encoder", &config.encoder, rng)?;
        MlpHead::init(params, "head", config.encoder.embed_dim, config.head_hidden, rng)?;
        Self::describe(config)
    }

    pub fn describe(config: &BaselineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: SignalEncoder::describe("encoder", &config.encoder),
            head: MlpHead::new("head", config.encoder.embed_dim, config.head_hidden),
        })
    }

    /// Positions `[batch, 2]` from stacked inputs `[batch, a_max·3, taps]`.
    pub fn forward_stacked(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let h = self.encoder.forward(tape, bound, x)?;
        self.head.forward(tape, bound, h)
    }
}

/// Stacks the CIRs of `samples` into their antenna slots of an
/// `[a_max·3, taps]` tensor; slots outside `subset` stay zero.
pub fn baseline_input(
    a_max: usize,
    samples: &[(&Tensor, usize)],
    subset: &AntennaSubset,
) -> Result<Tensor> {
    if let Some(&bad) = subset.ids().iter().find(|&&id| id >= a_max) {
        return Err(Error::AntennaId { id: bad, a_max });
    }
    let slot = CHANNELS * TAPS;
    let mut data = vec![0.0; a_max * slot];
    let mut seen = vec![false; a_max];
    for (taps, id) in samples {
        check_taps(taps)?;
        if !subset.contains(*id) {
            return Err(Error::Validation(format!(
                "sample from antenna {id} is outside subset {:?}",
                subset.ids()
            )));
        }
        if std::mem::replace(&mut seen[*id], true) {
            return Err(Error::Validation(format!("duplicate antenna id {id}")));
        }
        data[id * slot..(id + 1) * slot].copy_from_slice(taps.data());
    }
    if let Some(&missing) = subset.ids().iter().find(|&&id| !seen[id]) {
        return Err(Error::Validation(format!(
            "subset antenna {missing} has no sample"
        )));
    }
    Tensor::new([a_max * CHANNELS, TAPS], data)
}

pub fn baseline_forward(
    model: &BaselineResNet,
    params: &ParamSet,
    samples: &[(&Tensor, usize)],
    subset: &AntennaSubset,
) -> Result<[f64; 2]> {
    let a_max = model.config.a_max;
    let input = baseline_input(a_max, samples, subset)?;
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let x = tape.constant(input.reshape([1, a_max * CHANNELS, TAPS])?);
    let out = model.forward_stacked(&mut tape, &bound, x)?;
    let v = tape.value(out).data();
    Ok([v[0], v[1]])
}

/// Either architecture behind one batched interface.
#[derive(Clone, Debug)]
pub enum Network {
    AdaPos(AdaPosModel),
    Baseline(BaselineResNet),
}

impl Network {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<(Self, ParamSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = match spec {
            ModelSpec::AdaPos(c) => Network::AdaPos(AdaPosModel::init(c, &mut params, &mut rng)?),
            ModelSpec::Baseline(c) => {
                Network::Baseline(BaselineResNet::init(c, &mut params, &mut rng)?)
            }
        };
        Ok((net, params))
    }

    pub fn describe(spec: &ModelSpec) -> Result<Self> {
        Ok(match spec {
            ModelSpec::AdaPos(c) => Network::AdaPos(AdaPosModel::describe(c)?),
            ModelSpec::Baseline(c) => Network::Baseline(BaselineResNet::describe(c)?),
        })
    }

    pub fn a_max(&self) -> usize {
        match self {
            Network::AdaPos(m) => m.config.a_max,
            Network::Baseline(m) => m.config.a_max,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Network::AdaPos(_) => Architecture::AdaPos,
            Network::Baseline(_) => Architecture::Baseline,
        }
    }

    /// Positions `[inputs.len(), 2]`. Each input holds one CIR per antenna
    /// id (`a_max` entries); only the ids in `subset` are read.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        inputs: &[&[Tensor]],
        subset: &AntennaSubset,
    ) -> Result<Var> {
        let a_max = self.a_max();
        if inputs.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        if let Some(&bad) = subset.ids().iter().find(|&&id| id >= a_max) {
            return Err(Error::AntennaId { id: bad, a_max });
        }
        for cirs in inputs {
            if cirs.len() != a_max {
                return Err(Error::Validation(format!(
                    "input has {} antenna slots, model expects {a_max}",
                    cirs.len()
                )));
            }
        }
        let slot = CHANNELS * TAPS;
        match self {
            Network::AdaPos(m) => {
                let n = subset.len();
                let mut data = Vec::with_capacity(inputs.len() * n * slot);
                let mut ids = Vec::with_capacity(inputs.len() * n);
                for cirs in inputs {
                    for &id in subset.ids() {
                        check_taps(&cirs[id])?;
                        data.extend_from_slice(cirs[id].data());
                        ids.push(id);
                    }
                }
                let x = tape.constant(Tensor::new([inputs.len() * n, CHANNELS, TAPS], data)?);
                m.forward_sets(tape, bound, x, &ids, n)
            }
            Network::Baseline(m) => {
                let mut data = vec![0.0; inputs.len() * a_max * slot];
                for (b, cirs) in inputs.iter().enumerate() {
                    for &id in subset.ids() {
                        check_taps(&cirs[id])?;
                        let at = (b * a_max + id) * slot;
                        data[at..at + slot].copy_from_slice(cirs[id].data());
                    }
                }
                let x = tape.constant(Tensor::new([inputs.len(), a_max * CHANNELS, TAPS], data)?);
                m.forward_stacked(tape, bound, x)
            }
        }
    }

    /// Forward without gradients, returned as plain points.
    pub fn predict(
        &self,
        params: &ParamSet,
        inputs: &[&[Tensor]],
        subset: &AntennaSubset,
    ) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::new();
        let bound = tape.bind(params)?;
        let out = self.forward_batch(&mut tape, &bound, inputs, subset)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(2)
            .map(|p| [p[0], p[1]])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::{seq::SliceRandom, Rng};

    use super::*;
    use crate::tensor::finite_difference_check;

    fn random_cir(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn([CHANNELS, TAPS], |_| rng.random_range(0.0..1.0))
    }

    fn test_model(a_max: usize, seed: u64) -> (AdaPosModel, ParamSet) {
        let (net, params) = Network::init(&ModelSpec::AdaPos(AdaPosConfig::test(a_max)), seed).unwrap();
        match net {
            Network::AdaPos(m) => (m, params),
            _ => unreachable!(),
        }
    }

    /// Independent subset enumeration over bitmasks.
    fn brute_count(a_max: usize, n_min: usize, n_max: usize) -> u64 {
        (0u32..1 << a_max)
            .filter(|m| (n_min..=n_max).contains(&(m.count_ones() as usize)))
            .count() as u64
    }

    #[test]
    fn configuration_counts() {
        assert_eq!(count_configurations(6, 2, 6).unwrap(), 57);
        let per_size: Vec<u64> = (2..=6).map(|k| count_configurations(6, k, k).unwrap()).collect();
        assert_eq!(per_size, [15, 20, 15, 6, 1]);
        assert_eq!(count_configurations(4, 1, 4).unwrap(), 15);
        for a in 1..=10 {
            for lo in 1..=a {
                for hi in lo..=a {
                    assert_eq!(count_configurations(a, lo, hi).unwrap(), brute_count(a, lo, hi));
                }
            }
        }
        assert!(matches!(count_configurations(6, 0, 3), Err(Error::Config(_))));
        assert!(matches!(count_configurations(6, 4, 3), Err(Error::Config(_))));
        assert!(matches!(count_configurations(6, 2, 7), Err(Error::Config(_))));
    }

    #[test]
    fn subset_representation() {
        assert!(AntennaSubset::new(vec![0, 2, 5], 6).is_ok());
        assert!(matches!(AntennaSubset::new(vec![], 6), Err(Error::Validation(_))));
        assert!(matches!(AntennaSubset::new(vec![2, 1], 6), Err(Error::Validation(_))));
        assert!(matches!(AntennaSubset::new(vec![1, 1], 6), Err(Error::Validation(_))));
        assert!(matches!(AntennaSubset::new(vec![6], 6), Err(Error::AntennaId { .. })));
        assert_eq!(AntennaSubset::from_unsorted(vec![4, 1], 6).unwrap().ids(), [1, 4]);
    }

    #[test]
    fn full_config_validates() {
        AdaPosConfig::full(6).validate().unwrap();
        BaselineConfig::full(6).validate().unwrap();
        AdaPosConfig::desk(6).validate().unwrap();
        BaselineConfig::desk(6).validate().unwrap();
        let mut bad = AdaPosConfig::test(6);
        bad.d_model = 30;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_rejects_bad_sets() {
        let (m, p) = test_model(6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cir(&mut rng);
        assert!(matches!(adapos_forward(&m, &p, &[]), Err(Error::Validation(_))));
        assert!(matches!(
            adapos_forward(&m, &p, &[(&c, 1), (&c, 1)]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(adapos_forward(&m, &p, &[(&c, 6)]), Err(Error::AntennaId { .. })));
    }

    #[test]
    fn forward_is_order_invariant() {
        let (m, p) = test_model(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cirs: Vec<Tensor> = (0..6).map(|_| random_cir(&mut rng)).collect();
        let mut set: Vec<(&Tensor, usize)> = cirs.iter().zip(0..).collect();
        let base = adapos_forward(&m, &p, &set).unwrap();
        for _ in 0..5 {
            set.shuffle(&mut rng);
            let out = adapos_forward(&m, &p, &set).unwrap();
            assert!((out[0] - base[0]).abs() <= 1e-9 && (out[1] - base[1]).abs() <= 1e-9);
        }
    }

    #[test]
    fn antenna_labels_matter_only_through_the_table() {
        let (m, mut p) = test_model(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_cir(&mut rng), random_cir(&mut rng));
        let out1 = adapos_forward(&m, &p, &[(&a, 0), (&b, 3)]).unwrap();
        let out2 = adapos_forward(&m, &p, &[(&a, 3), (&b, 0)]).unwrap();
        assert!((out1[0] - out2[0]).abs() > 1e-9 || (out1[1] - out2[1]).abs() > 1e-9);
        p.get_mut("antenna_table").unwrap().data_mut().fill(0.0);
        let out1 = adapos_forward(&m, &p, &[(&a, 0), (&b, 3)]).unwrap();
        let out2 = adapos_forward(&m, &p, &[(&a, 3), (&b, 0)]).unwrap();
        assert!((out1[0] - out2[0]).abs() <= 1e-12 && (out1[1] - out2[1]).abs() <= 1e-12);
    }

    #[test]
    fn encoder_is_shared_across_antennas() {
        let (m, p) = test_model(6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cir(&mut rng);
        let mut tape = Tape::new();
        let bound = tape.bind(&p).unwrap();
        let x = tape.constant(Tensor::new([2, CHANNELS, TAPS], [c.data(), c.data()].concat()).unwrap());
        let enc = m.encode(&mut tape, &bound, x).unwrap();
        let v = tape.value(enc).data();
        let d = m.config.d_model;
        assert_eq!(&v[..d], &v[d..]);
        // one encoder parameter set, regardless of a_max
        let count = p.paths().filter(|s| s.starts_with("encoder.")).count();
        let (_, p32) = test_model(32, 7);
        assert_eq!(count, p32.paths().filter(|s| s.starts_with("encoder.")).count());
    }

    #[test]
    fn every_subset_size_yields_a_point() {
        let (m, p) = test_model(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cirs: Vec<Tensor> = (0..6).map(|_| random_cir(&mut rng)).collect();
        for mask in 1u32..64 {
            let set: Vec<(&Tensor, usize)> =
                (0..6).filter(|i| mask >> i & 1 == 1).map(|i| (&cirs[i], i)).collect();
            let out = adapos_forward(&m, &p, &set).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batched_forward_matches_single_sets() {
        let (net, p) = Network::init(&ModelSpec::AdaPos(AdaPosConfig::test(4)), 11).unwrap();
        let Network::AdaPos(m) = &net else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let snaps: Vec<Vec<Tensor>> = (0..3)
            .map(|_| (0..4).map(|_| random_cir(&mut rng)).collect())
            .collect();
        let subset = AntennaSubset::new(vec![1, 3], 4).unwrap();
        let inputs: Vec<&[Tensor]> = snaps.iter().map(Vec::as_slice).collect();
        let batched = net.predict(&p, &inputs, &subset).unwrap();
        for (s, out) in snaps.iter().zip(&batched) {
            let single = adapos_forward(m, &p, &[(&s[1], 1), (&s[3], 3)]).unwrap();
            assert!((single[0] - out[0]).abs() < 1e-12 && (single[1] - out[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_zero_fills_absent_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cirs: Vec<Tensor> = (0..6).map(|_| random_cir(&mut rng)).collect();
        let subset = AntennaSubset::new(vec![0], 6).unwrap();
        let x = baseline_input(6, &[(&cirs[0], 0)], &subset).unwrap();
        let slot = CHANNELS * TAPS;
        assert_eq!(&x.data()[..slot], cirs[0].data());
        assert!(x.data()[slot..].iter().all(|v| v.to_bits() == 0));

        let full = AntennaSubset::full(6);
        let all: Vec<(&Tensor, usize)> = cirs.iter().zip(0..).collect();
        let x = baseline_input(6, &all, &full).unwrap();
        for id in 0..6 {
            assert_eq!(&x.data()[id * slot..(id + 1) * slot], cirs[id].data());
        }
        assert!(matches!(
            baseline_input(6, &[(&cirs[2], 2)], &subset),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn baseline_mask_is_information() {
        let (net, p) = Network::init(&ModelSpec::Baseline(BaselineConfig::test(6)), 14).unwrap();
        let Network::Baseline(m) = &net else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = random_cir(&mut rng);
        let a = baseline_forward(m, &p, &[(&c, 1)], &AntennaSubset::new(vec![1], 6).unwrap()).unwrap();
        let b = baseline_forward(m, &p, &[(&c, 4)], &AntennaSubset::new(vec![4], 6).unwrap()).unwrap();
        assert!(a != b);

        let cirs: Vec<Tensor> = (0..6).map(|_| random_cir(&mut rng)).collect();
        let subset = AntennaSubset::new(vec![0, 2, 3], 6).unwrap();
        let single = baseline_forward(
            m,
            &p,
            &[(&cirs[0], 0), (&cirs[2], 2), (&cirs[3], 3)],
            &subset,
        )
        .unwrap();
        let batched = net.predict(&p, &[cirs.as_slice()], &subset).unwrap();
        assert_eq!(batched[0], single);
    }

    #[test]
    fn adapos_siamese_composite_gradcheck() {
        let (net, params) = Network::init(&ModelSpec::AdaPos(AdaPosConfig::test(4)), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let snaps: Vec<Vec<Tensor>> = (0..4)
            .map(|_| (0..4).map(|_| random_cir(&mut rng)).collect())
            .collect();
        let subset = AntennaSubset::new(vec![0, 2, 3], 4).unwrap();
        let dists = [0.7, 1.9];
        let report = finite_difference_check(
            |tape, bound| {
                let inputs: Vec<&[Tensor]> = snaps.iter().map(Vec::as_slice).collect();
                let p = net.forward_batch(tape, bound, &inputs, &subset)?;
                // rows 0,1 and 2,3 form the two pairs
                let p = tape.reshape(p, [2, 4])?;
                let left = tape.constant(Tensor::new([4, 2], vec![1., 0., 0., 1., 0., 0., 0., 0.])?);
                let right = tape.constant(Tensor::new([4, 2], vec![0., 0., 0., 0., 1., 0., 0., 1.])?);
                let a = tape.matmul(p, left)?;
                let b = tape.matmul(p, right)?;
                let diff = tape.sub(a, b)?;
                let norm = tape.row_norm(diff)?;
                let d = tape.constant(Tensor::new([2], dists.to_vec())?);
                let r = tape.sub(d, norm)?;
                let sq = tape.square(r);
                Ok(tape.mean(sq))
            },
            &params,
            1e-5,
            1e-4,
            Some(24),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }
}
