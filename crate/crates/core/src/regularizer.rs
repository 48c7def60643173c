//! Attention regularization schemes behind a common trait.
//!
//! Each scheme implements `AttentionRegularizer` and registers under a name;
//! configs select schemes by that name at runtime, singly ("tlm") or in
//! combination ("tlm+att_dropout"). The trait exposes one hook per stage of
//! the attention computation, so composition order is fixed by construction:
//! connectivity restriction before softmax, weight dropout after softmax,
//! head dropout after the weighted sum. Every hook is an exact identity in
//! eval mode.

use crate::attention;
use crate::error::{Error, Result};
use crate::mask::{
    build_allow_matrix, select_masked_tokens, AllowMatrix, AttentionMaskVector, MaskStrategy,
    MaskedSet,
};
use crate::rng::{StreamPurpose, TrainRng};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

// ── Names and scheme sets ───────────────────────────────────────────────────

pub const SCHEME_NONE: &str = "none";
pub const SCHEME_ATT_DROPOUT: &str = "att_dropout";
pub const SCHEME_DROPHEAD: &str = "drophead";
pub const SCHEME_TLM: &str = "tlm";

/// A set of scheme names, parsed from strings like `"none"`, `"tlm"`, or
/// `"tlm+att_dropout"`. Canonical form is registry order, '+'-joined.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scheme {
    atoms: Vec<&'static str>,
}

impl Scheme {
    pub fn none() -> Self {
        Scheme { atoms: vec![SCHEME_NONE] }
    }

    pub fn single(name: &str) -> Result<Self> {
        name.parse()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.atoms.contains(&name)
    }

    pub fn atoms(&self) -> &[&'static str] {
        &self.atoms
    }

    /// All 2^3 subsets of the non-trivial schemes, "none" first, each in
    /// canonical registry order.
    pub fn all_combinations() -> Vec<Scheme> {
        let parts: Vec<&'static str> =
            registry().iter().map(|e| e.name).filter(|n| *n != SCHEME_NONE).collect();
        let mut out = Vec::with_capacity(8);
        for bits in 0u8..8 {
            let atoms: Vec<&'static str> = parts
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, p)| *p)
                .collect();
            if atoms.is_empty() {
                out.push(Scheme::none());
            } else {
                out.push(Scheme { atoms });
            }
        }
        out
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.atoms.join("+"))
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut atoms: Vec<&'static str> = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            let entry = registry()
                .iter()
                .find(|e| e.name == part)
                .ok_or_else(|| {
                    Error::config(
                        "scheme",
                        format!("unknown scheme `{part}` (known: {})", scheme_names().join(", ")),
                    )
                })?;
            if !atoms.contains(&entry.name) {
                atoms.push(entry.name);
            }
        }
        if atoms.is_empty() {
            return Err(Error::config("scheme", "empty scheme string"));
        }
        if atoms.contains(&SCHEME_NONE) && atoms.len() > 1 {
            return Err(Error::config("scheme", "`none` cannot be combined with other schemes"));
        }
        // Canonical order follows the registry.
        let order: Vec<&'static str> = registry().iter().map(|e| e.name).collect();
        atoms.sort_by_key(|a| order.iter().position(|o| o == a));
        Ok(Scheme { atoms })
    }
}

impl Serialize for Scheme {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ── Configuration ───────────────────────────────────────────────────────────

/// Which attention regularizers run and with what rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub scheme: Scheme,
    /// Shared rate: token-masking R, attention-dropout rate, head-drop rate.
    pub rate: f64,
    /// Probability that a batch uses the self strategy rather than siblings.
    pub p_self: f64,
    /// Token-masking rate override for encoder self-attention.
    pub encoder_rate: Option<f64>,
    /// Token-masking rate override for decoder self-attention.
    pub decoder_rate: Option<f64>,
    /// Also sever masked encoder keys in cross-attention.
    pub cross_attention_tlm: bool,
    /// Draw separate strategies for encoder and decoder each batch.
    pub independent_strategy_draws: bool,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec {
            scheme: Scheme::none(),
            rate: 0.1,
            p_self: 0.5,
            encoder_rate: None,
            decoder_rate: None,
            cross_attention_tlm: false,
            independent_strategy_draws: false,
        }
    }
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("rate", Some(self.rate)),
            ("encoder_rate", self.encoder_rate),
            ("decoder_rate", self.decoder_rate),
        ] {
            if let Some(v) = value {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::config(field, format!("must be in [0, 1), got {v}")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.p_self) {
            return Err(Error::config("p_self", format!("must be in [0, 1], got {}", self.p_self)));
        }
        Ok(())
    }

    /// Token-masking rate effective at a site.
    pub fn site_rate(&self, site: AttentionSite) -> f64 {
        match site {
            AttentionSite::EncoderSelf => self.encoder_rate.unwrap_or(self.rate),
            AttentionSite::DecoderSelf => self.decoder_rate.unwrap_or(self.rate),
            AttentionSite::Cross => self.encoder_rate.unwrap_or(self.rate),
        }
    }
}

// ── Hook context ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSite {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl AttentionSite {
    pub fn code(self) -> u64 {
        match self {
            AttentionSite::EncoderSelf => 0,
            AttentionSite::DecoderSelf => 1,
            AttentionSite::Cross => 2,
        }
    }
}

/// Predetermined masked sets, keyed by (site, layer, sequence). Used by
/// gradient checks and unit tests that need fixed masks.
#[derive(Clone, Debug, Default)]
pub struct PinnedMasks {
    map: BTreeMap<(u64, usize, usize), MaskedSet>,
}

impl PinnedMasks {
    pub fn new() -> Self {
        PinnedMasks::default()
    }

    pub fn pin(&mut self, site: AttentionSite, layer: usize, seq: usize, set: MaskedSet) {
        self.map.insert((site.code(), layer, seq), set);
    }

    pub fn get(&self, site: AttentionSite, layer: usize, seq: usize) -> Option<&MaskedSet> {
        self.map.get(&(site.code(), layer, seq))
    }
}

/// Everything a hook may consult at one attention site of one layer.
pub struct HookCtx<'a> {
    pub mode: Mode,
    pub site: AttentionSite,
    pub causal: bool,
    pub layer: usize,
    pub step: u64,
    pub strategy: MaskStrategy,
    pub rng: &'a TrainRng,
    pub pinned: Option<&'a PinnedMasks>,
}

// ── The trait and its implementations ───────────────────────────────────────

/// One attention regularization scheme. Default hooks are identities.
pub trait AttentionRegularizer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Tighten one sequence's query→key connectivity before scores are
    /// masked. Runs in train mode only.
    fn restrict_connectivity(
        &self,
        _allow: &mut AllowMatrix,
        _attn_m: &AttentionMaskVector,
        _seq: usize,
        _ctx: &HookCtx,
    ) -> Result<()> {
        Ok(())
    }

    /// Same, for the cross-attention site (keys live in the encoder).
    fn restrict_cross_keys(
        &self,
        _allow: &mut AllowMatrix,
        _memory_attn_m: &AttentionMaskVector,
        _seq: usize,
        _ctx: &HookCtx,
    ) -> Result<()> {
        Ok(())
    }

    /// Transform post-softmax weights (attention dropout lives here).
    fn transform_weights(&self, _tape: &mut Tape, weights: Var, _ctx: &HookCtx) -> Result<Var> {
        Ok(weights)
    }

    /// Transform per-head context vectors (head dropout lives here).
    fn transform_heads(&self, _tape: &mut Tape, heads: Var, _ctx: &HookCtx) -> Result<Var> {
        Ok(heads)
    }
}

struct NoRegularizer;

impl AttentionRegularizer for NoRegularizer {
    fn name(&self) -> &'static str {
        SCHEME_NONE
    }
}

struct TokenLevelMasking {
    spec: RegularizerSpec,
}

impl TokenLevelMasking {
    fn masked_for(
        &self,
        purpose: StreamPurpose,
        attn_m: &AttentionMaskVector,
        rate: f64,
        seq: usize,
        ctx: &HookCtx,
    ) -> Result<MaskedSet> {
        if let Some(pinned) = ctx.pinned {
            return Ok(pinned
                .get(ctx.site, ctx.layer, seq)
                .cloned()
                .unwrap_or_else(MaskedSet::empty));
        }
        let mut stream = ctx
            .rng
            .stream(purpose, [ctx.step, ctx.site.code(), ctx.layer as u64, seq as u64]);
        select_masked_tokens(attn_m, rate, &mut stream)
    }
}

impl AttentionRegularizer for TokenLevelMasking {
    fn name(&self) -> &'static str {
        SCHEME_TLM
    }

    fn restrict_connectivity(
        &self,
        allow: &mut AllowMatrix,
        attn_m: &AttentionMaskVector,
        seq: usize,
        ctx: &HookCtx,
    ) -> Result<()> {
        if ctx.mode == Mode::Eval {
            return Ok(());
        }
        let rate = self.spec.site_rate(ctx.site);
        let masked = self.masked_for(StreamPurpose::TokenMask, attn_m, rate, seq, ctx)?;
        *allow = build_allow_matrix(ctx.strategy, &masked, attn_m, ctx.causal)?;
        Ok(())
    }

    fn restrict_cross_keys(
        &self,
        allow: &mut AllowMatrix,
        memory_attn_m: &AttentionMaskVector,
        seq: usize,
        ctx: &HookCtx,
    ) -> Result<()> {
        if ctx.mode == Mode::Eval || !self.spec.cross_attention_tlm {
            return Ok(());
        }
        let rate = self.spec.site_rate(AttentionSite::Cross);
        let masked = self.masked_for(StreamPurpose::CrossMask, memory_attn_m, rate, seq, ctx)?;
        // The selection rule keeps at least one real encoder key unmasked,
        // so no decoder query row can go empty here.
        for t in masked.iter() {
            allow.clear_column(t);
        }
        Ok(())
    }
}

struct AttentionDropout {
    rate: f64,
}

impl AttentionRegularizer for AttentionDropout {
    fn name(&self) -> &'static str {
        SCHEME_ATT_DROPOUT
    }

    fn transform_weights(&self, tape: &mut Tape, weights: Var, ctx: &HookCtx) -> Result<Var> {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(weights);
        }
        let mut stream = ctx
            .rng
            .stream(StreamPurpose::AttDropout, [ctx.step, ctx.site.code(), ctx.layer as u64, 0]);
        attention::attention_dropout(tape, weights, self.rate, true, &mut stream)
    }
}

struct DropHead {
    rate: f64,
}

impl AttentionRegularizer for DropHead {
    fn name(&self) -> &'static str {
        SCHEME_DROPHEAD
    }

    fn transform_heads(&self, tape: &mut Tape, heads: Var, ctx: &HookCtx) -> Result<Var> {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(heads);
        }
        let mut stream = ctx
            .rng
            .stream(StreamPurpose::DropHead, [ctx.step, ctx.site.code(), ctx.layer as u64, 0]);
        attention::drophead(tape, heads, self.rate, true, &mut stream)
    }
}

// ── Registry ────────────────────────────────────────────────────────────────

type Factory = fn(&RegularizerSpec) -> Box<dyn AttentionRegularizer>;

pub struct RegistryEntry {
    pub name: &'static str,
    pub summary: &'static str,
    factory: Factory,
}

/// All schemes selectable by name, in canonical order.
pub fn registry() -> &'static [RegistryEntry] {
    static ENTRIES: [RegistryEntry; 4] = [
        RegistryEntry {
            name: SCHEME_NONE,
            summary: "no attention regularization",
            factory: |_| Box::new(NoRegularizer),
        },
        RegistryEntry {
            name: SCHEME_TLM,
            summary: "token-level connectivity masking (siblings/self strategies)",
            factory: |spec| Box::new(TokenLevelMasking { spec: spec.clone() }),
        },
        RegistryEntry {
            name: SCHEME_ATT_DROPOUT,
            summary: "dropout on post-softmax attention weights",
            factory: |spec| Box::new(AttentionDropout { rate: spec.rate }),
        },
        RegistryEntry {
            name: SCHEME_DROPHEAD,
            summary: "dropout of whole attention heads",
            factory: |spec| Box::new(DropHead { rate: spec.rate }),
        },
    ];
    &ENTRIES
}

pub fn scheme_names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

/// Instantiate one scheme by registered name.
pub fn create(name: &str, spec: &RegularizerSpec) -> Result<Box<dyn AttentionRegularizer>> {
    registry()
        .iter()
        .find(|e| e.name == name)
        .map(|e| (e.factory)(spec))
        .ok_or_else(|| {
            Error::config(
                "scheme",
                format!("unknown scheme `{name}` (known: {})", scheme_names().join(", ")),
            )
        })
}

/// The active schemes for a run, hook-dispatched in registry order.
pub struct RegularizerStack {
    items: Vec<Box<dyn AttentionRegularizer>>,
    spec: RegularizerSpec,
}

impl RegularizerStack {
    pub fn from_spec(spec: &RegularizerSpec) -> Result<Self> {
        spec.validate()?;
        let items = spec
            .scheme
            .atoms()
            .iter()
            .map(|name| create(name, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegularizerStack { items, spec: spec.clone() })
    }

    pub fn spec(&self) -> &RegularizerSpec {
        &self.spec
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn AttentionRegularizer> {
        self.items.iter().map(|b| b.as_ref())
    }

    pub fn has(&self, name: &str) -> bool {
        self.items.iter().any(|i| i.name() == name)
    }
}
