//! Registration predictors and the operators that stack them.
//!
//! A predictor maps an image pair `(moving A, fixed B)` to a transform `Φ`
//! with `A ∘ Φ ≈ B`. Operators:
//!
//! * `TS{Ψ¹, Ψ²}[A, B] = Ψ¹[A, B] ∘ Ψ²[A ∘ Ψ¹[A, B], B]`
//! * `DS{Ψ}[A, B] = Ψ[pool(A), pool(B)]`
//! * `TSC{Φ, Ψ}[A, B] = Φ[A, B]^½ ∘ Ψ[A ∘ Φ[A, B]^½, B ∘ Φ[B, A]^½] ∘ (Φ[B, A]^½)⁻¹`
//!
//! Leaves are numbered from 1 in left-to-right order. Warped intermediate
//! images are resampled from the original input with the accumulated map,
//! never from an already resampled image.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::generator::{coefficients_to_matrix, AffineGenerator, COEFFS};
use crate::error::{Error, Result};
use crate::geometry::{avg_pool, compose, max_abs, warp, AffineTransform, Grid, MapTransform, Volume};

/// Tolerance for the inverse-consistency check run when building a TSC node.
pub const IC_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Identity,
    AffinePrimitive,
    Imported,
    Composite,
}

/// Expression tree over registration predictors.
#[derive(Clone, Debug, PartialEq)]
pub enum RegPredictor {
    /// Always the identity map.
    Identity,
    /// `Ψ[A, B] = expm((θ(A, B) − θ(B, A)) / 2)`.
    AffinePrimitive(AffineGenerator),
    /// A fixed transform read from disk or constructed directly; ignores
    /// its inputs.
    Imported(MapTransform),
    TwoStep(Box<RegPredictor>, Box<RegPredictor>),
    DownSample(Box<RegPredictor>),
    TwoStepConsistent(Box<RegPredictor>, Box<RegPredictor>),
}

impl RegPredictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            RegPredictor::Identity => PredictorKind::Identity,
            RegPredictor::AffinePrimitive(_) => PredictorKind::AffinePrimitive,
            RegPredictor::Imported(_) => PredictorKind::Imported,
            _ => PredictorKind::Composite,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.kind() != PredictorKind::Composite
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            RegPredictor::TwoStep(a, b) | RegPredictor::TwoStepConsistent(a, b) => a.leaf_count() + b.leaf_count(),
            RegPredictor::DownSample(a) => a.leaf_count(),
            _ => 1,
        }
    }

    /// Leaves in index order.
    pub fn leaves(&self) -> Vec<&RegPredictor> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |l| out.push(l));
        out
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a RegPredictor)) {
        match self {
            RegPredictor::TwoStep(a, b) | RegPredictor::TwoStepConsistent(a, b) => {
                a.visit_leaves(f);
                b.visit_leaves(f);
            }
            RegPredictor::DownSample(a) => a.visit_leaves(f),
            leaf => f(leaf),
        }
    }

    fn collect_resolutions(&self, scale: f64, out: &mut Vec<f64>) {
        match self {
            RegPredictor::TwoStep(a, b) | RegPredictor::TwoStepConsistent(a, b) => {
                a.collect_resolutions(scale, out);
                b.collect_resolutions(scale, out);
            }
            RegPredictor::DownSample(a) => a.collect_resolutions(scale * 0.5, out),
            _ => out.push(scale),
        }
    }

    /// Runs the predictor on `(moving, fixed)`.
    pub fn predict(&self, moving: &Volume, fixed: &Volume) -> Result<Prediction> {
        let mut ctx = EvalCtx::recording();
        let transform = eval(
            self,
            &Image::new(Arc::new(moving.clone())),
            &Image::new(Arc::new(fixed.clone())),
            1,
            &mut ctx,
        )?;
        Ok(Prediction {
            transform,
            taps: FeatureTap { entries: ctx.taps },
        })
    }

    /// The transform alone.
    pub fn transform(&self, moving: &Volume, fixed: &Volume) -> Result<MapTransform> {
        let mut ctx = EvalCtx::silent();
        eval(
            self,
            &Image::new(Arc::new(moving.clone())),
            &Image::new(Arc::new(fixed.clone())),
            1,
            &mut ctx,
        )
    }
}

/// Wraps a moment generator as an inverse-consistent affine primitive.
pub fn ic_affine(generator: AffineGenerator) -> RegPredictor {
    RegPredictor::AffinePrimitive(generator)
}

pub fn ts(first: RegPredictor, second: RegPredictor) -> RegPredictor {
    RegPredictor::TwoStep(Box::new(first), Box::new(second))
}

pub fn ds(inner: RegPredictor) -> RegPredictor {
    RegPredictor::DownSample(Box::new(inner))
}

/// Inverse-consistent composition. Both children are checked on a probe
/// pair and rejected if `Ψ[A, B] ∘ Ψ[B, A]` deviates from the identity.
pub fn tsc(first: RegPredictor, second: RegPredictor) -> Result<RegPredictor> {
    check_inverse_consistent(&first)?;
    check_inverse_consistent(&second)?;
    Ok(tsc_unchecked(first, second))
}

/// TSC without the construction-time check. Only meaningful for
/// algebraic tests with image-independent children.
pub fn tsc_unchecked(first: RegPredictor, second: RegPredictor) -> RegPredictor {
    RegPredictor::TwoStepConsistent(Box::new(first), Box::new(second))
}

/// Two anisotropic blobs, sized relative to `length` (the generators'
/// length scale) so the check probes inputs of the scale the predictor was
/// built for.
fn probe_pair(length: f64) -> (Volume, Volume) {
    let u = length / 12.0;
    let grid = Grid::centered([10, 10, 10], 2.0 * u).expect("static grid");
    let blob = |c: [f64; 3], s: [f64; 3]| {
        Volume::from_fn(grid, move |p| {
            let r2: f64 = (0..3).map(|a| ((p[a] - u * c[a]) / (u * s[a])).powi(2)).sum();
            (-r2).exp()
        })
        .expect("finite blob")
    };
    (
        blob([1.5, -0.5, 0.8], [4.0, 3.0, 5.0]),
        blob([-0.7, 0.9, -0.4], [3.5, 4.5, 3.0]),
    )
}

fn length_scale(p: &RegPredictor) -> f64 {
    p.leaves()
        .into_iter()
        .find_map(|l| match l {
            RegPredictor::AffinePrimitive(g) => Some(g.spec().length_scale),
            _ => None,
        })
        .unwrap_or(12.0)
}

/// Worst deviation of `Ψ[A, B] ∘ Ψ[B, A]` from the identity.
pub fn inverse_consistency_residual(predictor: &RegPredictor, a: &Volume, b: &Volume) -> Result<f64> {
    let ab = predictor.transform(a, b)?;
    let ba = predictor.transform(b, a)?;
    if let (Some(x), Some(y)) = (ab.as_affine(), ba.as_affine()) {
        let prod = x.matrix() * y.matrix();
        return Ok(max_abs(&(prod - nalgebra::Matrix4::identity())));
    }
    let both = compose(&ab, &ba);
    Ok(b.grid()
        .points()
        .map(|p| {
            let q = both.apply(p);
            (0..3).map(|i| (q[i] - p[i]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max))
}

fn check_inverse_consistent(p: &RegPredictor) -> Result<()> {
    let (a, b) = probe_pair(length_scale(p));
    let residual = inverse_consistency_residual(p, &a, &b)?;
    if residual < IC_TOLERANCE {
        Ok(())
    } else {
        Err(Error::NotInverseConsistent { residual })
    }
}

/// Per-leaf feature vector captured during one forward evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TapEntry {
    pub leaf: usize,
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTap {
    entries: Vec<TapEntry>,
}

impl FeatureTap {
    pub fn entries(&self) -> &[TapEntry] {
        &self.entries
    }

    pub fn get(&self, leaf: usize) -> Option<&TapEntry> {
        self.entries.iter().find(|e| e.leaf == leaf)
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.leaf).collect()
    }

    /// Concatenated values of all entries in order.
    pub fn concat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub transform: MapTransform,
    pub taps: FeatureTap,
}

/// A registration network: a predictor tree plus per-leaf resolution
/// bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RegStack {
    root: RegPredictor,
    resolutions: Vec<f64>,
}

impl RegStack {
    pub fn new(root: RegPredictor) -> Self {
        let mut resolutions = Vec::new();
        root.collect_resolutions(1.0, &mut resolutions);
        RegStack { root, resolutions }
    }

    pub fn root(&self) -> &RegPredictor {
        &self.root
    }

    pub fn into_root(self) -> RegPredictor {
        self.root
    }

    pub fn leaf_count(&self) -> usize {
        self.resolutions.len()
    }

    /// Fraction of the input resolution at which each leaf operates.
    pub fn resolutions(&self) -> &[f64] {
        &self.resolutions
    }

    pub fn leaves(&self) -> Vec<&RegPredictor> {
        self.root.leaves()
    }

    /// Generators of the affine primitive leaves, keyed by leaf index.
    pub fn generators(&self) -> Vec<(usize, &AffineGenerator)> {
        self.leaves()
            .into_iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                RegPredictor::AffinePrimitive(g) => Some((i + 1, g)),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn generators_mut(&mut self) -> Vec<&mut AffineGenerator> {
        fn collect<'a>(node: &'a mut RegPredictor, out: &mut Vec<&'a mut AffineGenerator>) {
            match node {
                RegPredictor::TwoStep(a, b) | RegPredictor::TwoStepConsistent(a, b) => {
                    collect(a, out);
                    collect(b, out);
                }
                RegPredictor::DownSample(a) => collect(a, out),
                RegPredictor::AffinePrimitive(g) => out.push(g),
                _ => {}
            }
        }
        let mut out = Vec::new();
        collect(&mut self.root, &mut out);
        out
    }

    pub fn predict(&self, moving: &Volume, fixed: &Volume) -> Result<Prediction> {
        self.root.predict(moving, fixed)
    }

    pub fn transform(&self, moving: &Volume, fixed: &Volume) -> Result<MapTransform> {
        self.root.transform(moving, fixed)
    }

    /// Transform with one leaf's generator coefficient shifted by `delta`.
    /// Leaves before the perturbed one reuse their coefficients from `base`,
    /// the taps of an unperturbed pass on the same pair.
    pub(crate) fn transform_perturbed(
        &self,
        moving: &Arc<Volume>,
        fixed: &Arc<Volume>,
        perturbation: Perturbation,
        base: &FeatureTap,
    ) -> Result<MapTransform> {
        let mut ctx = EvalCtx {
            record: false,
            perturbation: Some(perturbation),
            base: Some(base),
            taps: Vec::new(),
        };
        eval(
            &self.root,
            &Image::new(moving.clone()),
            &Image::new(fixed.clone()),
            1,
            &mut ctx,
        )
    }

    pub(crate) fn predict_shared(&self, moving: &Arc<Volume>, fixed: &Arc<Volume>) -> Result<Prediction> {
        let mut ctx = EvalCtx::recording();
        let transform = eval(
            &self.root,
            &Image::new(moving.clone()),
            &Image::new(fixed.clone()),
            1,
            &mut ctx,
        )?;
        Ok(Prediction {
            transform,
            taps: FeatureTap { entries: ctx.taps },
        })
    }
}

/// `TSC{Ψ1, TSC{Ψ2, TSC{Ψ3, TSC{Ψ4, Ψ5}}}}` over five affine primitives.
pub fn build_affine_stack(generators: Vec<AffineGenerator>) -> Result<RegStack> {
    if generators.len() != 5 {
        return Err(Error::WrongArity {
            expected: 5,
            found: generators.len(),
        });
    }
    let mut leaves: Vec<RegPredictor> = generators.into_iter().map(ic_affine).collect();
    let mut node = leaves.pop().expect("five leaves");
    while let Some(first) = leaves.pop() {
        node = tsc(first, node)?;
    }
    Ok(RegStack::new(node))
}

/// `TS{TS{DS{TS{DS{Ψ¹}, Ψ²}}, Ψ³}, Ψ⁴}`: leaves run at 1/4, 1/2, 1 and 1
/// of the input resolution.
pub fn build_multires_stack(leaves: Vec<RegPredictor>) -> Result<RegStack> {
    let [l1, l2, l3, l4]: [RegPredictor; 4] = leaves.try_into().map_err(|v: Vec<RegPredictor>| Error::WrongArity {
        expected: 4,
        found: v.len(),
    })?;
    let root = ts(ts(ds(ts(ds(l1), l2)), l3), l4);
    Ok(RegStack::new(root))
}

/// Runs one forward evaluation and keeps the taps of the selected leaves.
pub fn extract_reg_features(
    stack: &RegStack,
    moving: &Volume,
    fixed: &Volume,
    leaf_select: &BTreeSet<usize>,
) -> Result<FeatureTap> {
    if let Some(&bad) = leaf_select.iter().find(|&&l| l == 0 || l > stack.leaf_count()) {
        return Err(Error::UnknownLeaf(bad));
    }
    let prediction = stack.predict(moving, fixed)?;
    Ok(FeatureTap {
        entries: prediction
            .taps
            .entries
            .into_iter()
            .filter(|e| leaf_select.contains(&e.leaf))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Perturbation {
    pub leaf: usize,
    pub coeff: usize,
    pub delta: f64,
}

struct EvalCtx<'a> {
    record: bool,
    perturbation: Option<Perturbation>,
    base: Option<&'a FeatureTap>,
    taps: Vec<TapEntry>,
}

impl EvalCtx<'_> {
    fn recording() -> Self {
        EvalCtx {
            record: true,
            perturbation: None,
            base: None,
            taps: Vec::new(),
        }
    }

    fn silent() -> Self {
        EvalCtx {
            record: false,
            perturbation: None,
            base: None,
            taps: Vec::new(),
        }
    }

    /// Coefficients of `leaf` from the base pass when the leaf precedes the
    /// perturbed one and therefore sees identical inputs.
    fn cached(&self, leaf: usize) -> Option<[f64; COEFFS]> {
        let p = self.perturbation?;
        if leaf >= p.leaf {
            return None;
        }
        let values = &self.base?.get(leaf)?.values;
        let tail = values.len().checked_sub(COEFFS)?;
        values[tail..].try_into().ok()
    }

    fn tap(&mut self, leaf: usize, values: Vec<f64>) {
        if self.record {
            let shape = vec![values.len()];
            self.taps.push(TapEntry { leaf, values, shape });
        }
    }
}

/// An image defined as `base ∘ map` sampled on `grid`.
#[derive(Clone)]
struct Image {
    base: Arc<Volume>,
    map: MapTransform,
    grid: Grid,
}

impl Image {
    fn new(base: Arc<Volume>) -> Self {
        let grid = *base.grid();
        Image {
            base,
            map: MapTransform::identity(),
            grid,
        }
    }

    fn materialize(&self) -> Arc<Volume> {
        if self.map.is_identity() && &self.grid == self.base.grid() {
            self.base.clone()
        } else {
            Arc::new(warp(&self.base, &self.map, &self.grid))
        }
    }

    fn warped(&self, t: &MapTransform, grid: Grid) -> Image {
        Image {
            base: self.base.clone(),
            map: compose(&self.map, t),
            grid,
        }
    }
}

fn primitive(g: &AffineGenerator, a: &Image, b: &Image, leaf: usize, ctx: &mut EvalCtx) -> AffineTransform {
    if let Some(coeffs) = ctx.cached(leaf) {
        return AffineTransform::from_generator(&coefficients_to_matrix(&coeffs));
    }
    let fa = g.features(&a.materialize());
    let fb = g.features(&b.materialize());
    let mut coeffs = g.antisymmetric(&fa, &fb);
    if let Some(p) = ctx.perturbation.filter(|p| p.leaf == leaf) {
        coeffs[p.coeff] += p.delta;
    }
    let transform = AffineTransform::from_generator(&coefficients_to_matrix(&coeffs));
    if ctx.record {
        let mut values = Vec::with_capacity(fa.len() + fb.len() + COEFFS);
        values.extend_from_slice(&fa);
        values.extend_from_slice(&fb);
        values.extend_from_slice(&coeffs);
        ctx.tap(leaf, values);
    }
    transform
}

fn eval(node: &RegPredictor, a: &Image, b: &Image, first_leaf: usize, ctx: &mut EvalCtx) -> Result<MapTransform> {
    match node {
        RegPredictor::Identity => {
            ctx.tap(first_leaf, Vec::new());
            Ok(MapTransform::identity())
        }
        RegPredictor::Imported(t) => {
            ctx.tap(first_leaf, Vec::new());
            Ok(t.clone())
        }
        RegPredictor::AffinePrimitive(g) => Ok(MapTransform::Affine(primitive(g, a, b, first_leaf, ctx))),
        RegPredictor::TwoStep(first, second) => {
            let phi = eval(first, a, b, first_leaf, ctx)?;
            let moved = a.warped(&phi, b.grid);
            let psi = eval(second, &moved, b, first_leaf + first.leaf_count(), ctx)?;
            Ok(compose(&phi, &psi))
        }
        RegPredictor::DownSample(inner) => {
            let pa = avg_pool(&a.materialize(), 2)?;
            let pb = avg_pool(&b.materialize(), 2)?;
            eval(
                inner,
                &Image::new(Arc::new(pa)),
                &Image::new(Arc::new(pb)),
                first_leaf,
                ctx,
            )
        }
        RegPredictor::TwoStepConsistent(first, second) => {
            let forward = eval(first, a, b, first_leaf, ctx)?;
            let forward = forward
                .as_affine()
                .cloned()
                .ok_or_else(|| Error::UnsupportedTopology("TSC needs an affine first child".into()))?;
            let half_ab = forward.sqrt()?;
            let half_ba = match (first.as_ref(), forward.generator()) {
                // Φ[B, A] = Φ[A, B]⁻¹ exactly for a primitive: negate the generator.
                (RegPredictor::AffinePrimitive(_), Some(g)) => AffineTransform::from_generator(&(-g * 0.5)),
                _ => {
                    let record = std::mem::replace(&mut ctx.record, false);
                    let backward = eval(first, b, a, first_leaf, ctx);
                    ctx.record = record;
                    backward?
                        .as_affine()
                        .ok_or_else(|| Error::UnsupportedTopology("TSC needs an affine first child".into()))?
                        .sqrt()?
                }
            };
            let a_mid = a.warped(&MapTransform::Affine(half_ab.clone()), a.grid);
            let b_mid = b.warped(&MapTransform::Affine(half_ba.clone()), b.grid);
            let psi = eval(second, &a_mid, &b_mid, first_leaf + first.leaf_count(), ctx)?;
            let left = compose(&MapTransform::Affine(half_ab), &psi);
            Ok(compose(&left, &MapTransform::Affine(half_ba.inverse())))
        }
    }
}
