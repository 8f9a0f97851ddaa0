//! Language-specific matrix synthesis.
//!
//! An [`LmsLinear`] holds a full-rank base weight `W` (r×c) together with, for
//! every language `l`, a tall "vertical" factor `V_l` (r×d) and a wide "flat"
//! factor `F_l` (d×c). The effective weight for a source/target pair is
//!
//! ```text
//! pair-wise:      W + V_src · F_tgt
//! language-wise:  W + V_src · F_src
//! ```
//!
//! Optionally the layer also carries one shared factor pair used by the
//! distillation route. Training-time forwards apply the factors in sequence
//! (`V · (F · x)`) and never build the r×c product.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mat, Var};
use crate::params::{join, Binder, ParamInfo, ParamKind, Parameterized};
use crate::scalar::Scalar;

/// Standard deviation of vertical factors at initialization.
pub const VERTICAL_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub usize);

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisMode {
    LanguageWise,
    #[default]
    PairWise,
}

/// Which low-rank delta a forward pass uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Language-specific factors.
    #[default]
    Ls,
    /// Shared factors (distillation student).
    Shared,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Ls => "ls",
            Route::Shared => "shared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedFactors<T> {
    pub vertical: Mat<T>,
    pub flat: Mat<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmsLinear<T> {
    #[serde(rename = "r")]
    rows: usize,
    #[serde(rename = "c")]
    cols: usize,
    #[serde(rename = "d")]
    rank: usize,
    mode: SynthesisMode,
    base: Mat<T>,
    verticals: Vec<Mat<T>>,
    flats: Vec<Mat<T>>,
    shared: Option<SharedFactors<T>>,
}

/// Multiply-adds per token column for one projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub base: u64,
    pub lms_extra: u64,
}

/// `base = r·c`, `lms_extra = d·(r + c)`.
pub fn projection_flops(rows: usize, cols: usize, rank: usize) -> LayerFlops {
    LayerFlops {
        base: rows as u64 * cols as u64,
        lms_extra: rank as u64 * (rows as u64 + cols as u64),
    }
}

fn validate_shape(rows: usize, cols: usize, rank: usize, languages: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rank == 0 || languages == 0 {
        return Err(Error::config(format!(
            "LMS layer needs r, c, d, L >= 1 (got r={rows}, c={cols}, d={rank}, L={languages})"
        )));
    }
    if 2 * rank > rows.min(cols) {
        return Err(Error::config(format!(
            "LMS rank d={rank} exceeds min(r, c)/2 for a {rows}x{cols} weight"
        )));
    }
    Ok(())
}

impl<T: Scalar> LmsLinear<T> {
    /// Fresh layer: base ~ N(0, 1/c), verticals ~ N(0, 0.02²), flats zero.
    pub fn new(
        rows: usize,
        cols: usize,
        rank: usize,
        languages: usize,
        mode: SynthesisMode,
        with_shared: bool,
        seed: u64,
    ) -> Result<Self> {
        validate_shape(rows, cols, rank, languages)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Mat::gaussian(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng);
        Self::with_base(base, rank, languages, mode, with_shared, &mut rng)
    }

    /// Wraps an existing base weight and draws fresh factors from `rng`.
    pub fn with_base<R: Rng + ?Sized>(
        base: Mat<T>,
        rank: usize,
        languages: usize,
        mode: SynthesisMode,
        with_shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (rows, cols) = base.shape();
        validate_shape(rows, cols, rank, languages)?;
        let verticals = (0..languages)
            .map(|_| Mat::gaussian(rows, rank, VERTICAL_INIT_STD, rng))
            .collect();
        let flats = (0..languages).map(|_| Mat::zeros(rank, cols)).collect();
        let shared = with_shared.then(|| SharedFactors {
            vertical: Mat::gaussian(rows, rank, VERTICAL_INIT_STD, rng),
            flat: Mat::zeros(rank, cols),
        });
        Ok(Self {
            rows,
            cols,
            rank,
            mode,
            base,
            verticals,
            flats,
            shared,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn languages(&self) -> usize {
        self.verticals.len()
    }

    pub fn mode(&self) -> SynthesisMode {
        self.mode
    }

    pub fn has_shared(&self) -> bool {
        self.shared.is_some()
    }

    pub fn base(&self) -> &Mat<T> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Mat<T> {
        &mut self.base
    }

    pub fn vertical(&self, l: LanguageId) -> Result<&Mat<T>> {
        self.verticals.get(l.0).ok_or_else(|| unknown(l))
    }

    pub fn flat(&self, l: LanguageId) -> Result<&Mat<T>> {
        self.flats.get(l.0).ok_or_else(|| unknown(l))
    }

    pub fn vertical_mut(&mut self, l: LanguageId) -> Result<&mut Mat<T>> {
        self.verticals.get_mut(l.0).ok_or_else(|| unknown(l))
    }

    pub fn flat_mut(&mut self, l: LanguageId) -> Result<&mut Mat<T>> {
        self.flats.get_mut(l.0).ok_or_else(|| unknown(l))
    }

    pub fn shared(&self) -> Option<&SharedFactors<T>> {
        self.shared.as_ref()
    }

    pub fn shared_mut(&mut self) -> Option<&mut SharedFactors<T>> {
        self.shared.as_mut()
    }

    /// Factor pair selected by `(src, tgt)` under this layer's mode and `route`.
    pub fn factors(&self, src: LanguageId, tgt: LanguageId, route: Route) -> Result<(&Mat<T>, &Mat<T>)> {
        match route {
            Route::Ls => {
                let flat_lang = match self.mode {
                    SynthesisMode::PairWise => tgt,
                    SynthesisMode::LanguageWise => src,
                };
                Ok((self.vertical(src)?, self.flat(flat_lang)?))
            }
            Route::Shared => {
                let s = self
                    .shared
                    .as_ref()
                    .ok_or_else(|| Error::config("shared route requested on an LMS layer without shared factors"))?;
                Ok((&s.vertical, &s.flat))
            }
        }
    }

    /// Materialized `W + V_src · F_tgt` (or `F_src` language-wise).
    pub fn synthesize(&self, src: LanguageId, tgt: LanguageId) -> Result<Mat<T>> {
        self.synthesize_route(src, tgt, Route::Ls)
    }

    pub fn synthesize_route(&self, src: LanguageId, tgt: LanguageId, route: Route) -> Result<Mat<T>> {
        let (v, f) = self.factors(src, tgt, route)?;
        self.base.add(&v.matmul(f)?)
    }

    /// Column-major forward on `x` (c×B): `W·x + V·(F·x)`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x: Var,
        src: LanguageId,
        tgt: LanguageId,
        route: Route,
    ) -> Result<Var> {
        let (v, f) = self.factors(src, tgt, route)?;
        let w = b.bind(g, &self.base);
        let v = b.bind(g, v);
        let f = b.bind(g, f);
        let base = g.matmul(w, x)?;
        let fx = g.matmul(f, x)?;
        let delta = g.matmul(v, fx)?;
        g.add(base, delta)
    }

    /// Row-major forward on `x` (B×c): `x·Wᵀ + (x·Fᵀ)·Vᵀ`.
    pub fn forward_rows(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x: Var,
        src: LanguageId,
        tgt: LanguageId,
        route: Route,
    ) -> Result<Var> {
        let (v, f) = self.factors(src, tgt, route)?;
        let w = b.bind(g, &self.base);
        let v = b.bind(g, v);
        let f = b.bind(g, f);
        let base = g.matmul_nt(x, w)?;
        let xf = g.matmul_nt(x, f)?;
        let delta = g.matmul_nt(xf, v)?;
        g.add(base, delta)
    }

    pub fn flops_per_token(&self) -> LayerFlops {
        projection_flops(self.rows, self.cols, self.rank)
    }

    /// Parameters beyond the base weight: `L·d·(r+c)`, plus `d·(r+c)` with shared factors.
    pub fn extra_params(&self) -> usize {
        let per = self.rank * (self.rows + self.cols);
        per * self.languages() + if self.shared.is_some() { per } else { 0 }
    }
}

fn unknown(l: LanguageId) -> Error {
    Error::Lookup {
        kind: "language",
        name: l.to_string(),
    }
}

impl<T: Scalar> Parameterized<T> for LmsLinear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "base"), ParamKind::Base), &self.base);
        for (l, m) in self.verticals.iter().enumerate() {
            f(
                &ParamInfo::new(join(prefix, &format!("vertical.{l}")), ParamKind::LanguageSpecific),
                m,
            );
        }
        for (l, m) in self.flats.iter().enumerate() {
            f(
                &ParamInfo::new(join(prefix, &format!("flat.{l}")), ParamKind::LanguageSpecific),
                m,
            );
        }
        if let Some(s) = &self.shared {
            f(
                &ParamInfo::new(join(prefix, "shared_vertical"), ParamKind::SharedFactor),
                &s.vertical,
            );
            f(
                &ParamInfo::new(join(prefix, "shared_flat"), ParamKind::SharedFactor),
                &s.flat,
            );
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "base"), ParamKind::Base), &mut self.base);
        for (l, m) in self.verticals.iter_mut().enumerate() {
            f(
                &ParamInfo::new(join(prefix, &format!("vertical.{l}")), ParamKind::LanguageSpecific),
                m,
            );
        }
        for (l, m) in self.flats.iter_mut().enumerate() {
            f(
                &ParamInfo::new(join(prefix, &format!("flat.{l}")), ParamKind::LanguageSpecific),
                m,
            );
        }
        if let Some(s) = &mut self.shared {
            f(
                &ParamInfo::new(join(prefix, "shared_vertical"), ParamKind::SharedFactor),
                &mut s.vertical,
            );
            f(
                &ParamInfo::new(join(prefix, "shared_flat"), ParamKind::SharedFactor),
                &mut s.flat,
            );
        }
    }
}
