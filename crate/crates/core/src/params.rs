//! Flat parameter layout.
//!
//! Random-effect blocks are stored standardized: the effect entering the
//! linear predictor is `σ · z`, with `z` carrying the structured prior and
//! `σ` stored as `log σ` in the hyperparameter block.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::structure::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    AlphaTmic,
    AlphaPaed,
    AlphaAdult,
    PsiTmic,
    PsiPaed,
    PsiAdult,
    PhiTmic,
    PhiPaed,
    PhiAdult,
    Theta,
    GammaTmic,
    GammaPaed,
    GammaAdult,
    Delta,
    Zeta,
    LogSigma,
    LogitRho,
    LogitShare,
}

/// Random-effect blocks, in the order of their `log σ` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RandomEffect {
    PsiTmic,
    PsiPaed,
    PsiAdult,
    PhiTmic,
    PhiPaed,
    PhiAdult,
    Theta,
    GammaTmic,
    GammaPaed,
    GammaAdult,
    Delta,
    Zeta,
}

impl RandomEffect {
    pub const ALL: [RandomEffect; 12] = [
        RandomEffect::PsiTmic,
        RandomEffect::PsiPaed,
        RandomEffect::PsiAdult,
        RandomEffect::PhiTmic,
        RandomEffect::PhiPaed,
        RandomEffect::PhiAdult,
        RandomEffect::Theta,
        RandomEffect::GammaTmic,
        RandomEffect::GammaPaed,
        RandomEffect::GammaAdult,
        RandomEffect::Delta,
        RandomEffect::Zeta,
    ];

    pub fn block(self) -> Block {
        match self {
            RandomEffect::PsiTmic => Block::PsiTmic,
            RandomEffect::PsiPaed => Block::PsiPaed,
            RandomEffect::PsiAdult => Block::PsiAdult,
            RandomEffect::PhiTmic => Block::PhiTmic,
            RandomEffect::PhiPaed => Block::PhiPaed,
            RandomEffect::PhiAdult => Block::PhiAdult,
            RandomEffect::Theta => Block::Theta,
            RandomEffect::GammaTmic => Block::GammaTmic,
            RandomEffect::GammaPaed => Block::GammaPaed,
            RandomEffect::GammaAdult => Block::GammaAdult,
            RandomEffect::Delta => Block::Delta,
            RandomEffect::Zeta => Block::Zeta,
        }
    }

    pub fn sigma_slot(self) -> usize {
        self as usize
    }
}

/// Autocorrelation parameters, in the order of their logit-scale entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RhoSlot {
    PhiTmic,
    PhiPaed,
    PhiAdult,
    Theta,
    GammaTmic,
    GammaPaed,
    GammaAdult,
    DeltaAge,
    DeltaTime,
    Zeta,
}

pub const N_RHO: usize = 10;

/// Maps a logit-scale correlation to `(-1, 1)`: `2 / (1 + e^{-x}) − 1`.
pub fn rho_from_logit(x: f64) -> f64 {
    2.0 / (1.0 + (-x).exp()) - 1.0
}

/// Derivative of [`rho_from_logit`].
pub fn drho_dlogit(x: f64) -> f64 {
    let r = rho_from_logit(x);
    0.5 * (1.0 - r * r)
}

pub fn logit_from_rho(rho: f64) -> f64 {
    ((1.0 + rho) / (1.0 - rho)).ln()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block: Block,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of every named block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<BlockEntry>,
    len: usize,
    /// Row count of each Kronecker block (`z` stored row-major).
    n_regions: usize,
    n_years: usize,
    n_basis_all: usize,
    n_basis_paed: usize,
    n_basis_adult: usize,
}

impl Layout {
    pub fn new(
        grid: &Grid,
        n_basis_all: usize,
        n_basis_paed: usize,
        n_basis_adult: usize,
        n_free_shares: usize,
    ) -> Self {
        let ni = grid.n_regions();
        let nt = grid.n_model_years();
        let sizes = [
            (Block::AlphaTmic, 1),
            (Block::AlphaPaed, 1),
            (Block::AlphaAdult, 1),
            (Block::PsiTmic, ni),
            (Block::PsiPaed, ni),
            (Block::PsiAdult, ni),
            (Block::PhiTmic, n_basis_all),
            (Block::PhiPaed, n_basis_paed),
            (Block::PhiAdult, n_basis_adult),
            (Block::Theta, nt),
            (Block::GammaTmic, n_basis_all * ni),
            (Block::GammaPaed, n_basis_paed * ni),
            (Block::GammaAdult, n_basis_adult * ni),
            (Block::Delta, n_basis_adult * nt),
            (Block::Zeta, ni * nt),
            (Block::LogSigma, RandomEffect::ALL.len()),
            (Block::LogitRho, N_RHO),
            (Block::LogitShare, n_free_shares),
        ];
        let mut entries = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for (block, len) in sizes {
            entries.push(BlockEntry { block, offset, len });
            offset += len;
        }
        Layout {
            entries,
            len: offset,
            n_regions: ni,
            n_years: nt,
            n_basis_all,
            n_basis_paed,
            n_basis_adult,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let e = &self.entries[block as usize];
        e.offset..e.offset + e.len
    }

    pub fn sigma_index(&self, re: RandomEffect) -> usize {
        self.range(Block::LogSigma).start + re.sigma_slot()
    }

    pub fn rho_index(&self, slot: RhoSlot) -> usize {
        self.range(Block::LogitRho).start + slot as usize
    }

    /// Which block a flat index falls in.
    pub fn block_of(&self, index: usize) -> Option<Block> {
        self.entries
            .iter()
            .find(|e| index >= e.offset && index < e.offset + e.len)
            .map(|e| e.block)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn n_basis_all(&self) -> usize {
        self.n_basis_all
    }

    pub fn n_basis_paed(&self) -> usize {
        self.n_basis_paed
    }

    pub fn n_basis_adult(&self) -> usize {
        self.n_basis_adult
    }

    /// Stable textual description used for the layout hash.
    pub fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{:?}:{}+{}", e.block, e.offset, e.len))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.describe().as_bytes()))
    }
}

/// Flat parameter vector tied to a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: &Layout) -> Self {
        ParameterVector {
            values: vec![0.0; layout.len()],
        }
    }

    pub fn block(&self, layout: &Layout, block: Block) -> &[f64] {
        &self.values[layout.range(block)]
    }

    pub fn block_mut(&mut self, layout: &Layout, block: Block) -> &mut [f64] {
        &mut self.values[layout.range(block)]
    }

    pub fn sigma(&self, layout: &Layout, re: RandomEffect) -> f64 {
        self.values[layout.sigma_index(re)].exp()
    }

    pub fn rho(&self, layout: &Layout, slot: RhoSlot) -> f64 {
        rho_from_logit(self.values[layout.rho_index(slot)])
    }
}
