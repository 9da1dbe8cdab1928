use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, ClassifierPool};
use super::encoder::{Encoder, EncoderCfg};
use super::layers::Ctx;
use super::params::{Init, ParamId, ParamStore};
use super::translator::{Direction, Translator};
use super::{time_pool, LatentRep, Modality, ModelError, PoolKind};
use crate::numerics::{Real, Var};

/// The five networks, in registry order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    ESrc,
    EDst,
    TS2d,
    TD2s,
    Cls,
}

impl Net {
    pub const ALL: [Net; 5] = [Net::ESrc, Net::EDst, Net::TS2d, Net::TD2s, Net::Cls];

    /// Parameter-name prefix.
    pub fn prefix(self) -> &'static str {
        match self {
            Net::ESrc => "e_src",
            Net::EDst => "e_dst",
            Net::TS2d => "t_s2d",
            Net::TD2s => "t_d2s",
            Net::Cls => "cls",
        }
    }

    pub fn of_param(name: &str) -> Option<Net> {
        let head = name.split('.').next()?;
        Net::ALL.into_iter().find(|n| n.prefix() == head)
    }
}

impl fmt::Display for Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Per-network forward-pass counters.
#[derive(Debug, Default)]
pub struct NetCounters([AtomicU64; 5]);

impl NetCounters {
    fn bump(&self, net: Net) {
        self.0[net as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, net: Net) -> u64 {
        self.0[net as usize].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in &self.0 {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> BTreeMap<Net, u64> {
        Net::ALL.into_iter().map(|n| (n, self.get(n))).collect()
    }
}

impl Clone for NetCounters {
    fn clone(&self) -> Self {
        let c = NetCounters::default();
        for n in Net::ALL {
            c.0[n as usize].store(self.get(n), Ordering::Relaxed);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub src: EncoderCfg,
    pub dst: EncoderCfg,
    pub classifier_pool: ClassifierPool,
    /// Space in which the contrastive similarity is computed.
    pub contrastive_pool: PoolKind,
    pub init_std: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            src: EncoderCfg::default(),
            dst: EncoderCfg::default(),
            classifier_pool: ClassifierPool::default(),
            contrastive_pool: PoolKind::default(),
            init_std: 0.02,
        }
    }
}

/// Geometry of one input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamShape {
    pub channels: usize,
    pub n_w: usize,
    pub patch_len: usize,
}

/// Encoders, translators and classifier over one parameter registry.
#[derive(Clone, Debug)]
pub struct ModelBundle<F: Real> {
    pub params: ParamStore<F>,
    cfg: ModelCfg,
    e_src: Option<Encoder>,
    e_dst: Encoder,
    t_s2d: Option<Translator>,
    t_d2s: Option<Translator>,
    cls: Classifier,
    net_of: Vec<Net>,
    counters: NetCounters,
}

impl<F: Real> ModelBundle<F> {
    /// Full two-modality bundle (all five networks).
    pub fn paired(
        cfg: &ModelCfg,
        src: StreamShape,
        dst: StreamShape,
        classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if cfg.src.d != cfg.dst.d {
            return Err(ModelError::Config(format!(
                "src and dst embedding dims differ ({} vs {})",
                cfg.src.d, cfg.dst.d
            )));
        }
        let (ts, td) = (src.n_w / src.patch_len.max(1), dst.n_w / dst.patch_len.max(1));
        if ts != td {
            return Err(ModelError::Config(format!(
                "src and dst must yield the same patch count, got {ts} vs {td}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, std: cfg.init_std };
        let mut store = ParamStore::new();
        let d = cfg.dst.d;
        let e_src = Encoder::new(&mut store, &mut init, "e_src", Modality::Src, &cfg.src, src.channels, src.n_w, src.patch_len)?;
        let e_dst = Encoder::new(&mut store, &mut init, "e_dst", Modality::Dst, &cfg.dst, dst.channels, dst.n_w, dst.patch_len)?;
        let t_s2d = Translator::new(
            &mut store, &mut init, "t_s2d", Direction::S2d, dst.channels, td, d,
            cfg.dst.layers, cfg.dst.heads, cfg.dst.mlp_ratio, cfg.dst.dropout,
        )?;
        let t_d2s = Translator::new(
            &mut store, &mut init, "t_d2s", Direction::D2s, src.channels, ts, d,
            cfg.src.layers, cfg.src.heads, cfg.src.mlp_ratio, cfg.src.dropout,
        )?;
        let cls = Classifier::new(&mut store, &mut init, "cls", cfg.classifier_pool, dst.channels, d, classes)?;
        Self::assemble(cfg, store, Some(e_src), e_dst, Some(t_s2d), Some(t_d2s), cls)
    }

    /// Single-encoder bundle over all sensors concatenated channel-wise.
    pub fn fused(cfg: &ModelCfg, stream: StreamShape, classes: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, std: cfg.init_std };
        let mut store = ParamStore::new();
        let e = Encoder::new(&mut store, &mut init, "e_dst", Modality::Fused, &cfg.dst, stream.channels, stream.n_w, stream.patch_len)?;
        let cls = Classifier::new(&mut store, &mut init, "cls", cfg.classifier_pool, stream.channels, cfg.dst.d, classes)?;
        Self::assemble(cfg, store, None, e, None, None, cls)
    }

    fn assemble(
        cfg: &ModelCfg,
        params: ParamStore<F>,
        e_src: Option<Encoder>,
        e_dst: Encoder,
        t_s2d: Option<Translator>,
        t_d2s: Option<Translator>,
        cls: Classifier,
    ) -> Result<Self, ModelError> {
        let net_of = params
            .iter()
            .map(|(_, name, _)| {
                Net::of_param(name).ok_or_else(|| ModelError::Contract(format!("unowned parameter {name}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            params,
            cfg: cfg.clone(),
            e_src,
            e_dst,
            t_s2d,
            t_d2s,
            cls,
            net_of,
            counters: NetCounters::default(),
        })
    }

    pub fn cfg(&self) -> &ModelCfg {
        &self.cfg
    }

    pub fn is_paired(&self) -> bool {
        self.e_src.is_some()
    }

    pub fn classes(&self) -> usize {
        self.cls.classes()
    }

    pub fn classifier(&self) -> &Classifier {
        &self.cls
    }

    pub fn counters(&self) -> &NetCounters {
        &self.counters
    }

    pub fn net_of(&self, id: ParamId) -> Net {
        self.net_of[id.index()]
    }

    pub fn param_ids(&self, net: Net) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.net_of(id) == net).collect()
    }

    /// Networks that own at least one parameter.
    pub fn nets(&self) -> Vec<Net> {
        Net::ALL
            .into_iter()
            .filter(|&n| self.net_of.contains(&n))
            .collect()
    }

    pub fn head_bias(&self) -> ParamId {
        self.cls.head_bias()
    }

    pub fn encoder(&self, modality: Modality) -> Option<&Encoder> {
        match modality {
            Modality::Src => self.e_src.as_ref(),
            Modality::Dst | Modality::Fused => Some(&self.e_dst).filter(|e| e.modality == modality),
        }
    }

    /// `x[B, c, n_w]` → token grid.
    pub fn encode(&self, ctx: &mut Ctx<F>, modality: Modality, x: Var) -> Result<LatentRep, ModelError> {
        let enc = self
            .encoder(modality)
            .ok_or_else(|| ModelError::Contract(format!("bundle has no {modality:?} encoder")))?;
        self.counters.bump(if modality == Modality::Src { Net::ESrc } else { Net::EDst });
        enc.forward(ctx, x)
    }

    pub fn translate(&self, ctx: &mut Ctx<F>, dir: Direction, r: &LatentRep) -> Result<LatentRep, ModelError> {
        let (t, net) = match dir {
            Direction::S2d => (self.t_s2d.as_ref(), Net::TS2d),
            Direction::D2s => (self.t_d2s.as_ref(), Net::TD2s),
        };
        let t = t.ok_or_else(|| ModelError::Contract("bundle has no translators".into()))?;
        self.counters.bump(net);
        t.forward(ctx, r)
    }

    pub fn classify(&self, ctx: &mut Ctx<F>, r: &LatentRep) -> Result<Var, ModelError> {
        self.counters.bump(Net::Cls);
        self.cls.forward(ctx, r)
    }

    /// Pooled vectors in the contrastive similarity space.
    pub fn pool(&self, ctx: &mut Ctx<F>, r: &LatentRep) -> Result<Var, ModelError> {
        time_pool(ctx, r, self.cfg.contrastive_pool)
    }

    /// Copy with parameters converted to another float type.
    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle {
            params: self.params.cast(),
            cfg: self.cfg.clone(),
            e_src: self.e_src.clone(),
            e_dst: self.e_dst.clone(),
            t_s2d: self.t_s2d.clone(),
            t_d2s: self.t_d2s.clone(),
            cls: self.cls.clone(),
            net_of: self.net_of.clone(),
            counters: NetCounters::default(),
        }
    }
}
