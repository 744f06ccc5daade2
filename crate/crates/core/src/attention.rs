//! Joint multi-branch attention over `S = [T; X; C1; C2]`.
//!
//! Text and noise tokens share the primary (`t&n`) projection branch; the
//! reference-person (`c1`) and garment (`c2`) tokens each have their own
//! `W_Q, W_K, W_V, W_O`. The additive exclusion mask blocks every score
//! between `c1` and `c2`, so those pairs get exactly zero weight after the
//! softmax. [`joint_attention_blockskip`] produces the same output without
//! ever computing the blocked score blocks.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{rope_on_tape, PositionGrid, RopeConfig};
use crate::tensor::{Tape, Tensor, Var, NEG_SENTINEL};

/// Which projection branch a token goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    /// Prompt and noise tokens.
    TextNoise,
    /// Source-person (reference) tokens.
    Reference,
    /// Garment tokens.
    Garment,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::TextNoise, Branch::Reference, Branch::Garment];

    pub fn key(self) -> &'static str {
        match self {
            Branch::TextNoise => "tn",
            Branch::Reference => "c1",
            Branch::Garment => "c2",
        }
    }
}

/// Segment lengths of `[T; X; C1; C2]`, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segmentation {
    pub text: usize,
    pub noise: usize,
    pub reference: usize,
    pub garment: usize,
}

impl Segmentation {
    pub fn new(text: usize, noise: usize, reference: usize, garment: usize) -> Self {
        Segmentation {
            text,
            noise,
            reference,
            garment,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.noise + self.reference + self.garment
    }

    pub fn text_span(&self) -> Range<usize> {
        0..self.text
    }

    pub fn noise_span(&self) -> Range<usize> {
        self.text..self.text + self.noise
    }

    pub fn reference_span(&self) -> Range<usize> {
        let s = self.text + self.noise;
        s..s + self.reference
    }

    pub fn garment_span(&self) -> Range<usize> {
        let s = self.text + self.noise + self.reference;
        s..s + self.garment
    }

    pub fn branch_span(&self, b: Branch) -> Range<usize> {
        match b {
            Branch::TextNoise => 0..self.text + self.noise,
            Branch::Reference => self.reference_span(),
            Branch::Garment => self.garment_span(),
        }
    }

    pub fn branch_of(&self, i: usize) -> Branch {
        if i < self.text + self.noise {
            Branch::TextNoise
        } else if i < self.text + self.noise + self.reference {
            Branch::Reference
        } else {
            Branch::Garment
        }
    }

    /// Whether query `i` may attend to key `j` under the exclusion mask.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        !matches!(
            (self.branch_of(i), self.branch_of(j)),
            (Branch::Reference, Branch::Garment) | (Branch::Garment, Branch::Reference)
        )
    }
}

/// Token matrix `[L, d]` plus its segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub seg: Segmentation,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, seg: Segmentation) -> Result<Self> {
        let (l, _) = tokens.dims2()?;
        if l != seg.total() {
            return Err(Error::contract(
                "token_sequence",
                format!("{l} tokens but segmentation covers {}", seg.total()),
            ));
        }
        Ok(TokenSequence { tokens, seg })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Additive `L×L` mask: `NEG_SENTINEL` on the `c1↔c2` blocks, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub seg: Segmentation,
    pub dense: Tensor,
}

impl AttentionMask {
    pub fn blocked_count(&self) -> usize {
        self.dense.data().iter().filter(|&&v| v == NEG_SENTINEL).count()
    }
}

pub fn build_mask(seg: Segmentation) -> AttentionMask {
    let l = seg.total();
    let dense = Tensor::from_fn(&[l, l], |idx| {
        if seg.allowed(idx / l, idx % l) {
            0.0
        } else {
            NEG_SENTINEL
        }
    });
    AttentionMask { seg, dense }
}

/// Low-rank update `W + (α/r)·B·A` with `A: [r, d_in]`, `B: [d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub down: Tensor,
    pub up: Tensor,
}

impl LoraAdapter {
    /// `A` uniform in `±1/√d_in`, `B` all zeros.
    pub fn init<R: Rng>(rank: usize, alpha: f64, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::contract(
                "lora",
                format!("rank {rank} outside 1..={}", d_in.min(d_out)),
            ));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(LoraAdapter {
            rank,
            alpha,
            down: Tensor::from_fn(&[rank, d_in], |_| rng.gen_range(-bound..bound)),
            up: Tensor::zeros(&[d_out, rank]),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// Dense `W + (α/r)·B·A`.
    pub fn merged(&self, base: &Tensor) -> Result<Tensor> {
        let delta = self.up.matmul(&self.down)?;
        let s = self.scale();
        base.zip_map(&delta, |w, d| w + s * d)
    }
}

/// Projects row tokens `z: [L, d_in]` through `base + (α/r)·B·A`.
pub fn apply_lora(base: &Tensor, adapter: &LoraAdapter, z: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = base.dims2()?;
    if adapter.rank > d_in.min(d_out) {
        return Err(Error::contract(
            "apply_lora",
            format!("rank {} exceeds {}", adapter.rank, d_in.min(d_out)),
        ));
    }
    if adapter.down.shape() != [adapter.rank, d_in] || adapter.up.shape() != [d_out, adapter.rank] {
        return Err(Error::dim(
            "apply_lora",
            format!("A {:?}, B {:?} for base {:?}", adapter.down.shape(), adapter.up.shape(), base.shape()),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let lin = LinearVars {
        weight: tape.constant(base.clone()),
        lora: Some(LoraVars {
            down: tape.constant(adapter.down.clone()),
            up: tape.constant(adapter.up.clone()),
            scale: adapter.scale(),
        }),
    };
    let y = linear(&mut tape, zv, &lin, None)?;
    Ok(tape.value(y).clone())
}

/// The four `[d, d]` matrices of one branch, stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    /// Optional adapters for `(q, k, v, o)`.
    pub lora: Option<[LoraAdapter; 4]>,
}

impl ProjectionWeights {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut m = || Tensor::from_fn(&[d, d], |_| rng.gen_range(-bound..bound));
        ProjectionWeights {
            q: m(),
            k: m(),
            v: m(),
            o: m(),
            lora: None,
        }
    }

    pub fn identity(d: usize) -> Self {
        ProjectionWeights {
            q: Tensor::eye(d),
            k: Tensor::eye(d),
            v: Tensor::eye(d),
            o: Tensor::eye(d),
            lora: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchProjections {
    pub text_noise: ProjectionWeights,
    pub reference: ProjectionWeights,
    pub garment: ProjectionWeights,
}

impl BranchProjections {
    /// All three branches equal to `w`.
    pub fn shared(w: ProjectionWeights) -> Self {
        BranchProjections {
            text_noise: w.clone(),
            reference: w.clone(),
            garment: w,
        }
    }

    pub fn branch(&self, b: Branch) -> &ProjectionWeights {
        match b {
            Branch::TextNoise => &self.text_noise,
            Branch::Reference => &self.reference,
            Branch::Garment => &self.garment,
        }
    }

    fn dim(&self) -> usize {
        self.text_noise.q.shape()[0]
    }

    fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let mut bind_branch = |w: &ProjectionWeights| {
            let mats = [&w.q, &w.k, &w.v, &w.o];
            let mut lins = mats.map(|m| LinearVars {
                weight: tape.constant(m.clone()),
                lora: None,
            });
            if let Some(adapters) = &w.lora {
                for (lin, a) in lins.iter_mut().zip(adapters) {
                    lin.lora = Some(LoraVars {
                        down: tape.constant(a.down.clone()),
                        up: tape.constant(a.up.clone()),
                        scale: a.scale(),
                    });
                }
            }
            let [q, k, v, o] = lins;
            BranchVars { q, k, v, o }
        };
        AttentionVars {
            text_noise: bind_branch(&self.text_noise),
            reference: bind_branch(&self.reference),
            garment: bind_branch(&self.garment),
        }
    }
}

/// Tape handles for a LoRA pair.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

/// Tape handles for one `[out, in]` projection and its optional adapter.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub lora: Option<LoraVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub text_noise: BranchVars,
    pub reference: BranchVars,
    pub garment: BranchVars,
}

impl AttentionVars {
    fn branch(&self, b: Branch) -> &BranchVars {
        match b {
            Branch::TextNoise => &self.text_noise,
            Branch::Reference => &self.reference,
            Branch::Garment => &self.garment,
        }
    }
}

/// Multiply-accumulate counts keyed by operation name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub macs: BTreeMap<String, u64>,
}

impl FlopReport {
    pub fn add(&mut self, name: &str, macs: u64) {
        *self.macs.entry(name.to_string()).or_default() += macs;
    }

    pub fn get(&self, name: &str) -> u64 {
        self.macs.get(name).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &FlopReport) {
        for (k, v) in &other.macs {
            self.add(k, *v);
        }
    }

    pub fn total(&self) -> u64 {
        self.macs.values().sum()
    }
}

pub const PROJECTION_MACS: &str = "projection";
pub const SCORE_MACS: &str = "attention_scores";
pub const VALUE_MACS: &str = "attention_values";

/// `z · Wᵀ (+ s · (z · Aᵀ) · Bᵀ)`.
pub fn linear(tape: &mut Tape, z: Var, lin: &LinearVars, flops: Option<&mut FlopReport>) -> Result<Var> {
    let y = tape.matmul_nt(z, lin.weight)?;
    let rows = tape.value(z).shape()[0] as u64;
    let (d_out, d_in) = tape.value(lin.weight).dims2()?;
    let mut macs = rows * (d_in * d_out) as u64;
    let out = match lin.lora {
        None => y,
        Some(l) => {
            let r = tape.value(l.down).shape()[0];
            macs += rows * (r * (d_in + d_out)) as u64;
            let za = tape.matmul_nt(z, l.down)?;
            let zab = tape.matmul_nt(za, l.up)?;
            let scaled = tape.scale(zab, l.scale);
            tape.add(y, scaled)?
        }
    };
    if let Some(f) = flops {
        f.add(PROJECTION_MACS, macs);
    }
    Ok(out)
}

/// Kernel used to evaluate the masked attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    /// Full `L×L` scores with the additive mask.
    DenseMasked,
    /// Skips the `c1↔c2` score blocks entirely.
    BlockSkip,
}

/// Static description of one joint-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSetup<'a> {
    pub seg: Segmentation,
    pub positions: Option<&'a PositionGrid>,
    pub rope_theta: f64,
    pub heads: usize,
    /// Apply the `c1↔c2` exclusion. When false every token sees every token.
    pub masked: bool,
    pub kernel: AttentionKernel,
}

/// Tape output of [`joint_attention_on_tape`].
#[derive(Debug)]
pub struct AttentionTapeOutput {
    pub output: Var,
    /// Post-softmax `[L, L]` weights per head (dense kernel only).
    pub weights: Vec<Var>,
}

fn non_empty_groups(seg: &Segmentation) -> Vec<(Branch, Range<usize>)> {
    Branch::ALL
        .iter()
        .map(|&b| (b, seg.branch_span(b)))
        .filter(|(_, r)| !r.is_empty())
        .collect()
}

/// Slices `rows` out of `x`, skipping the slice when it covers all of `x`.
fn take_rows(tape: &mut Tape, x: Var, rows: Range<usize>) -> Result<Var> {
    if rows.start == 0 && rows.end == tape.value(x).shape()[0] {
        Ok(x)
    } else {
        tape.rows(x, rows.start, rows.len())
    }
}

fn concat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(parts, 0)
    }
}

/// Records joint attention on `tape` for tokens `x: [L, d]`.
pub fn joint_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    setup: &AttentionSetup<'_>,
    flops: &mut FlopReport,
) -> Result<AttentionTapeOutput> {
    let seg = setup.seg;
    let (l, d) = tape.value(x).dims2()?;
    if l != seg.total() || l == 0 {
        return Err(Error::contract(
            "joint_attention",
            format!("{l} tokens for segmentation totalling {}", seg.total()),
        ));
    }
    if setup.heads == 0 || d % setup.heads != 0 {
        return Err(Error::contract(
            "joint_attention",
            format!("width {d} not divisible by {} heads", setup.heads),
        ));
    }
    for b in Branch::ALL {
        let (wo, wi) = tape.value(w.branch(b).q.weight).dims2()?;
        if wo != d || wi != d {
            return Err(Error::contract(
                "joint_attention",
                format!("{} projection is {wo}x{wi}, expected {d}x{d}", b.key()),
            ));
        }
    }
    let dk = d / setup.heads;
    let groups = non_empty_groups(&seg);

    // per-branch Q, K, V
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (b, rows) in &groups {
        let z = take_rows(tape, x, rows.clone())?;
        let bv = w.branch(*b);
        qs.push(linear(tape, z, &bv.q, Some(flops))?);
        ks.push(linear(tape, z, &bv.k, Some(flops))?);
        vs.push(linear(tape, z, &bv.v, Some(flops))?);
    }
    let mut q = concat_rows(tape, &qs)?;
    let mut k = concat_rows(tape, &ks)?;
    let v = concat_rows(tape, &vs)?;
    if let Some(pos) = setup.positions {
        if pos.len() != l {
            return Err(Error::contract(
                "joint_attention",
                format!("{} positions for {l} tokens", pos.len()),
            ));
        }
        let cfg = RopeConfig {
            head_dim: dk,
            theta: setup.rope_theta,
        };
        q = rope_on_tape(tape, q, pos, &cfg, setup.heads)?;
        k = rope_on_tape(tape, k, pos, &cfg, setup.heads)?;
    }
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let skip = setup.masked && setup.kernel == AttentionKernel::BlockSkip && seg.reference > 0 && seg.garment > 0;

    let mut weights = Vec::new();
    let mut group_outputs = Vec::new();
    if skip {
        for (b, rows) in &groups {
            let qg = take_rows(tape, q, rows.clone())?;
            let (kg, vg) = match b {
                Branch::TextNoise => (k, v),
                Branch::Reference => {
                    let end = seg.reference_span().end;
                    (take_rows(tape, k, 0..end)?, take_rows(tape, v, 0..end)?)
                }
                Branch::Garment => {
                    let tn = seg.text + seg.noise;
                    let gs = seg.garment_span();
                    let mut kp = Vec::new();
                    let mut vp = Vec::new();
                    if tn > 0 {
                        kp.push(tape.rows(k, 0, tn)?);
                        vp.push(tape.rows(v, 0, tn)?);
                    }
                    kp.push(tape.rows(k, gs.start, gs.len())?);
                    vp.push(tape.rows(v, gs.start, gs.len())?);
                    (concat_rows(tape, &kp)?, concat_rows(tape, &vp)?)
                }
            };
            let keys = tape.value(kg).shape()[0];
            let mut heads = Vec::with_capacity(setup.heads);
            for h in 0..setup.heads {
                let qh = tape.slice(qg, 1, h * dk, dk)?;
                let kh = tape.slice(kg, 1, h * dk, dk)?;
                let vh = tape.slice(vg, 1, h * dk, dk)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv_sqrt);
                let p = tape.softmax(s, None)?;
                heads.push(tape.matmul(p, vh)?);
                flops.add(SCORE_MACS, (rows.len() * keys * dk) as u64);
                flops.add(VALUE_MACS, (rows.len() * keys * dk) as u64);
            }
            let a = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
            group_outputs.push(linear(tape, a, &w.branch(*b).o, Some(flops))?);
        }
    } else {
        let mask = setup.masked.then(|| build_mask(seg));
        let mut heads = Vec::with_capacity(setup.heads);
        for h in 0..setup.heads {
            let qh = tape.slice(q, 1, h * dk, dk)?;
            let kh = tape.slice(k, 1, h * dk, dk)?;
            let vh = tape.slice(v, 1, h * dk, dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            let p = tape.softmax(s, mask.as_ref().map(|m| &m.dense))?;
            weights.push(p);
            heads.push(tape.matmul(p, vh)?);
            flops.add(SCORE_MACS, (l * l * dk) as u64);
            flops.add(VALUE_MACS, (l * l * dk) as u64);
        }
        let a = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        for (b, rows) in &groups {
            let ag = take_rows(tape, a, rows.clone())?;
            group_outputs.push(linear(tape, ag, &w.branch(*b).o, Some(flops))?);
        }
    }
    let output = concat_rows(tape, &group_outputs)?;
    Ok(AttentionTapeOutput { output, weights })
}

/// Result of a standalone attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    pub output: TokenSequence,
    /// Per-head `[L, L]` post-softmax weights; empty for the block-skip kernel.
    pub weights: Vec<Tensor>,
    pub flops: FlopReport,
}

fn run_standalone(
    seq: &TokenSequence,
    proj: &BranchProjections,
    pos: Option<&PositionGrid>,
    masked: bool,
    heads: usize,
    kernel: AttentionKernel,
) -> Result<AttentionResult> {
    if proj.dim() != seq.dim() {
        return Err(Error::contract(
            "joint_attention",
            format!("projections are {0}x{0}, tokens are {1} wide", proj.dim(), seq.dim()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let vars = proj.bind(&mut tape);
    let setup = AttentionSetup {
        seg: seq.seg,
        positions: pos,
        rope_theta: 10_000.0,
        heads,
        masked,
        kernel,
    };
    let mut flops = FlopReport::default();
    let out = joint_attention_on_tape(&mut tape, x, &vars, &setup, &mut flops)?;
    Ok(AttentionResult {
        output: TokenSequence::new(tape.value(out.output).clone(), seq.seg)?,
        weights: out.weights.iter().map(|&w| tape.value(w).clone()).collect(),
        flops,
    })
}

/// Dense masked joint attention. `pos = None` disables RoPE; `mask = None`
/// disables the exclusion.
pub fn joint_attention(
    seq: &TokenSequence,
    proj: &BranchProjections,
    pos: Option<&PositionGrid>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<AttentionResult> {
    if let Some(m) = mask {
        if m.seg != seq.seg {
            return Err(Error::contract("joint_attention", "mask built for a different segmentation"));
        }
    }
    run_standalone(seq, proj, pos, mask.is_some(), heads, AttentionKernel::DenseMasked)
}

/// Same result as masked [`joint_attention`], computed without the blocked
/// `c1↔c2` score blocks.
pub fn joint_attention_blockskip(
    seq: &TokenSequence,
    proj: &BranchProjections,
    pos: Option<&PositionGrid>,
    heads: usize,
) -> Result<AttentionResult> {
    run_standalone(seq, proj, pos, true, heads, AttentionKernel::BlockSkip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_two_off_diagonal_blocks() {
        let m = build_mask(Segmentation::new(2, 2, 3, 3));
        assert_eq!(m.dense.shape(), &[10, 10]);
        assert_eq!(m.blocked_count(), 18);
        for i in 0..10 {
            for j in 0..10 {
                let blocked = (4..7).contains(&i) && (7..10).contains(&j) || (7..10).contains(&i) && (4..7).contains(&j);
                assert_eq!(m.dense.at2(i, j) == NEG_SENTINEL, blocked, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_without_garment_is_all_zero() {
        let m = build_mask(Segmentation::new(2, 3, 4, 0));
        assert!(m.dense.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_row_ignores_garment_value() {
        // identity projections, one token per segment, no RoPE
        let seg = Segmentation::new(1, 1, 1, 1);
        let tokens = Tensor::from_rows(&[&[0.1, 0.4], &[0.7, -0.2], &[0.3, 0.9], &[5.0, -4.0]]);
        let seq = TokenSequence::new(tokens.clone(), seg).unwrap();
        let proj = BranchProjections::shared(ProjectionWeights::identity(2));
        let mask = build_mask(seg);
        let res = joint_attention(&seq, &proj, None, Some(&mask), 1).unwrap();
        let w = &res.weights[0];
        assert_eq!(w.at2(2, 3), 0.0);
        assert_eq!(w.at2(3, 2), 0.0);
        // softmax over {T, X, C1} only
        let q = [0.3, 0.9];
        let scores: Vec<f64> = (0..3)
            .map(|j| (q[0] * tokens.at2(j, 0) + q[1] * tokens.at2(j, 1)) / 2f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| scores[j].exp() / z * tokens.at2(j, c)).sum();
            assert!((res.output.tokens.at2(2, c) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = Segmentation::new(1, 0, 0, 0);
        let tokens = Tensor::from_fn(&[1, 4], |_| rng.gen_range(-1.0..1.0));
        let mut w = ProjectionWeights::init(4, &mut rng);
        w.o = Tensor::eye(4);
        let proj = BranchProjections::shared(w.clone());
        let seq = TokenSequence::new(tokens.clone(), seg).unwrap();
        let res = joint_attention(&seq, &proj, None, Some(&build_mask(seg)), 2).unwrap();
        let v = tokens.matmul(&w.v.transpose2().unwrap()).unwrap();
        assert!(res.output.tokens.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn width_not_divisible_by_heads() {
        let seg = Segmentation::new(1, 1, 0, 0);
        let seq = TokenSequence::new(Tensor::zeros(&[2, 6]), seg).unwrap();
        let proj = BranchProjections::shared(ProjectionWeights::identity(6));
        assert!(matches!(joint_attention(&seq, &proj, None, None, 4), Err(Error::Contract { .. })));
        let proj = BranchProjections::shared(ProjectionWeights::identity(4));
        assert!(matches!(joint_attention(&seq, &proj, None, None, 2), Err(Error::Contract { .. })));
    }

    #[test]
    fn lora_zero_init_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
        let a = LoraAdapter::init(2, 4.0, 5, 6, &mut rng).unwrap();
        assert_eq!(a.param_count(), 2 * (5 + 6));
        let z = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0));
        let got = apply_lora(&base, &a, &z).unwrap();
        let want = z.matmul(&base.transpose2().unwrap()).unwrap();
        assert_eq!(got, want);
        assert!(LoraAdapter::init(7, 1.0, 5, 6, &mut rng).is_err());
    }

    #[test]
    fn full_rank_lora_equals_full_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let base = Tensor::from_fn(&[d, d], |_| rng.gen_range(-1.0..1.0));
        let delta = Tensor::from_fn(&[d, d], |_| rng.gen_range(-1.0..1.0));
        let adapter = LoraAdapter {
            rank: d,
            alpha: d as f64,
            down: Tensor::eye(d),
            up: delta.clone(),
        };
        let z = Tensor::from_fn(&[5, d], |_| rng.gen_range(-1.0..1.0));
        let got = apply_lora(&base, &adapter, &z).unwrap();
        let merged = base.zip_map(&delta, |a, b| a + b).unwrap();
        let want = z.matmul(&merged.transpose2().unwrap()).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }
}
