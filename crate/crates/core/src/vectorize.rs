//! Persistence pairs to fixed-size feature vectors.
//!
//! Four point-transform families (triangle tent, 2-D gaussian bump, line
//! functional, rational hat) sample each (birth, death) pair at q learnable
//! locations. Node bars are transformed per view, concatenated across views,
//! and mapped through an affine head; cycle bars are transformed, summed in
//! a canonical order (so reordering input pairs changes nothing, bitwise),
//! concatenated, and mapped to a single global vector. Fusion adds both to
//! the attention features as residuals.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Triangle,
    Gaussian,
    Line,
    RationalHat,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Triangle => "triangle",
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Line => "line",
            FamilyKind::RationalHat => "rational-hat",
        }
    }

    pub fn parse(s: &str) -> Option<FamilyKind> {
        match s {
            "triangle" => Some(FamilyKind::Triangle),
            "gaussian" => Some(FamilyKind::Gaussian),
            "line" => Some(FamilyKind::Line),
            "rational-hat" => Some(FamilyKind::RationalHat),
            _ => None,
        }
    }
}

pub const DEFAULT_FAMILIES: [FamilyKind; 4] = [
    FamilyKind::Triangle,
    FamilyKind::Gaussian,
    FamilyKind::Line,
    FamilyKind::RationalHat,
];

/// One view's sampling of the persistence plane. All fields are learnable.
pub struct TransformInstance {
    pub kind: FamilyKind,
    /// Triangle: (q,) grid on [0,1]. Gaussian / rational hat: (q, 2)
    /// centers. Line: (q, 2) directions.
    pub samples: TensorRef,
    /// Gaussian sigma (1,), line offsets (q,), rational hat radius (1,).
    pub aux: Option<TensorRef>,
}

fn unit_grid(q: usize) -> Vec<f64> {
    if q == 1 {
        return vec![0.5];
    }
    (0..q).map(|i| i as f64 / (q - 1) as f64).collect()
}

fn square_grid(q: usize) -> Vec<f64> {
    let side = (q as f64).sqrt().ceil() as usize;
    let axis = unit_grid(side);
    let mut pts = Vec::with_capacity(q * 2);
    'outer: for &y in &axis {
        for &x in &axis {
            pts.extend([x, y]);
            if pts.len() == q * 2 {
                break 'outer;
            }
        }
    }
    pts
}

impl TransformInstance {
    /// Builds one instance. `instance_idx` picks the line angle from
    /// {0, 45, 90} degrees; a small seeded jitter on sample locations keeps
    /// sibling instances of the same family from starting identical.
    pub fn new(
        tape: &mut Tape,
        kind: FamilyKind,
        q: usize,
        instance_idx: usize,
        sigma: f64,
        radius: f64,
        rng: &mut Rng,
    ) -> Result<TransformInstance> {
        if q == 0 {
            return Err(Error::Config("need at least one transform sample".into()));
        }
        // Strictly inside (0, 1): rescaled pair coordinates do reach the
        // endpoints exactly, and a tent corner parked right on a data value
        // has no two-sided derivative.
        let jitter = |rng: &mut Rng, v: f64| (v + rng.uniform_in(-0.02, 0.02)).clamp(0.005, 0.995);
        match kind {
            FamilyKind::Triangle => {
                let grid: Vec<f64> = unit_grid(q).into_iter().map(|v| jitter(rng, v)).collect();
                let samples = tape.param(&[q], grid)?;
                Ok(TransformInstance { kind, samples, aux: None })
            }
            FamilyKind::Gaussian | FamilyKind::RationalHat => {
                let grid: Vec<f64> = square_grid(q).into_iter().map(|v| jitter(rng, v)).collect();
                let samples = tape.param(&[q, 2], grid)?;
                let aux_val = if kind == FamilyKind::Gaussian { sigma } else { radius };
                let aux = tape.param(&[1], vec![aux_val])?;
                Ok(TransformInstance { kind, samples, aux: Some(aux) })
            }
            FamilyKind::Line => {
                let base = [0.0, 45.0, 90.0][instance_idx % 3] * std::f64::consts::PI / 180.0;
                let mut dirs = Vec::with_capacity(q * 2);
                for _ in 0..q {
                    let theta = base + rng.uniform_in(-0.03, 0.03);
                    dirs.extend([theta.cos(), theta.sin()]);
                }
                let samples = tape.param(&[q, 2], dirs)?;
                let offsets: Vec<f64> = (0..q).map(|_| rng.uniform_in(-0.01, 0.01)).collect();
                let aux = tape.param(&[q], offsets)?;
                Ok(TransformInstance { kind, samples, aux: Some(aux) })
            }
        }
    }

    pub fn q(&self, tape: &Tape) -> usize {
        tape.shape(self.samples)[0]
    }

    pub fn params(&self) -> Vec<TensorRef> {
        let mut p = vec![self.samples];
        p.extend(self.aux);
        p
    }

    /// Maps (P,) birth/death vectors to a (P, q) sample matrix.
    pub fn apply(&self, tape: &mut Tape, births: TensorRef, deaths: TensorRef) -> Result<TensorRef> {
        let bv = tape.values(births);
        let dv = tape.values(deaths);
        for (i, (&b, &d)) in bv.iter().zip(dv).enumerate() {
            if b > d {
                return Err(Error::Contract(format!(
                    "pair {i} has birth {b} above death {d}"
                )));
            }
        }
        match self.kind {
            FamilyKind::Triangle => tape.triangle_pt(births, deaths, self.samples),
            FamilyKind::Gaussian => {
                tape.gaussian_pt(births, deaths, self.samples, self.aux.unwrap())
            }
            FamilyKind::Line => tape.line_pt(births, deaths, self.samples, self.aux.unwrap()),
            FamilyKind::RationalHat => {
                tape.rational_hat_pt(births, deaths, self.samples, self.aux.unwrap())
            }
        }
    }
}

/// Per-view filtration value maps: sigmoid of a learned affine projection
/// of the attention features, one column per view, values in (0, 1).
pub struct ViewProjections {
    pub w: TensorRef,
    pub b: TensorRef,
    pub k: usize,
}

impl ViewProjections {
    pub fn new(tape: &mut Tape, d: usize, k: usize, rng: &mut Rng) -> Result<ViewProjections> {
        let bound = 1.0 / (d as f64).sqrt();
        let w_vals: Vec<f64> = (0..d * k).map(|_| rng.uniform_in(-bound, bound)).collect();
        let w = tape.param(&[d, k], w_vals)?;
        let b = tape.param(&[k], vec![0.0; k])?;
        Ok(ViewProjections { w, b, k })
    }

    /// (P, d) features to (P, k) filtration values in (0, 1).
    pub fn forward(&self, tape: &mut Tape, z: TensorRef) -> Result<TensorRef> {
        let lin = tape.matmul(z, self.w)?;
        let shifted = tape.add(lin, self.b)?;
        tape.sigmoid(shifted)
    }

    pub fn params(&self) -> Vec<TensorRef> {
        vec![self.w, self.b]
    }
}

pub struct Vectorizer {
    pub views: Vec<TransformInstance>,
    pub q: usize,
    /// (k*q, d) affine head over concatenated per-node transforms.
    pub node_w: TensorRef,
    pub node_b: TensorRef,
    /// (k*q, d) affine head over concatenated cycle sums.
    pub global_w: TensorRef,
    pub global_b: TensorRef,
}

impl Vectorizer {
    pub fn new(
        tape: &mut Tape,
        families: &[FamilyKind],
        instances_per_family: usize,
        q: usize,
        d_out: usize,
        sigma: f64,
        radius: f64,
        rng: &mut Rng,
    ) -> Result<Vectorizer> {
        if families.is_empty() || instances_per_family == 0 {
            return Err(Error::Config("need at least one transform view".into()));
        }
        let mut views = Vec::with_capacity(families.len() * instances_per_family);
        for &fam in families {
            for inst in 0..instances_per_family {
                views.push(TransformInstance::new(tape, fam, q, inst, sigma, radius, rng)?);
            }
        }
        let k = views.len();
        let bound = 1.0 / ((k * q) as f64).sqrt();
        let mk = |tape: &mut Tape, rng: &mut Rng| -> Result<TensorRef> {
            let vals: Vec<f64> = (0..k * q * d_out).map(|_| rng.uniform_in(-bound, bound)).collect();
            tape.param(&[k * q, d_out], vals)
        };
        let node_w = mk(tape, rng)?;
        let global_w = mk(tape, rng)?;
        let node_b = tape.param(&[d_out], vec![0.0; d_out])?;
        let global_b = tape.param(&[d_out], vec![0.0; d_out])?;
        Ok(Vectorizer { views, q, node_w, node_b, global_w, global_b })
    }

    pub fn k(&self) -> usize {
        self.views.len()
    }

    pub fn params(&self) -> Vec<TensorRef> {
        let mut p = Vec::new();
        for v in &self.views {
            p.extend(v.params());
        }
        p.extend([self.node_w, self.node_b, self.global_w, self.global_b]);
        p
    }

    /// `pairs[i]` holds view i's per-node (birth, death) vectors, all of
    /// equal length P in node order. Returns (P, d) per-node features.
    pub fn vectorize_nodes(
        &self,
        tape: &mut Tape,
        pairs: &[(TensorRef, TensorRef)],
    ) -> Result<TensorRef> {
        if pairs.len() != self.views.len() {
            return Err(Error::Contract(format!(
                "{} pair sets for {} views",
                pairs.len(),
                self.views.len()
            )));
        }
        let mut cols = Vec::with_capacity(self.views.len());
        for (view, &(b, d)) in self.views.iter().zip(pairs) {
            cols.push(view.apply(tape, b, d)?);
        }
        let stacked = tape.concat_cols(&cols)?;
        let lin = tape.matmul(stacked, self.node_w)?;
        tape.add(lin, self.node_b)
    }

    /// `pairs[i]` holds view i's cycle (birth, death) vectors, or None when
    /// the view has no cycles. Pairs are re-sorted canonically before the
    /// sum, so input order cannot change the result. Returns (1, d).
    pub fn vectorize_cycles(
        &self,
        tape: &mut Tape,
        pairs: &[Option<(TensorRef, TensorRef)>],
    ) -> Result<TensorRef> {
        if pairs.len() != self.views.len() {
            return Err(Error::Contract(format!(
                "{} pair sets for {} views",
                pairs.len(),
                self.views.len()
            )));
        }
        let mut cols = Vec::with_capacity(self.views.len());
        for (view, slot) in self.views.iter().zip(pairs) {
            match *slot {
                Some((b, d)) => {
                    let m = tape.shape(b)[0];
                    let mut order: Vec<usize> = (0..m).collect();
                    {
                        let bv = tape.values(b);
                        let dv = tape.values(d);
                        order.sort_by(|&x, &y| {
                            bv[x].total_cmp(&bv[y]).then(dv[x].total_cmp(&dv[y]))
                        });
                    }
                    let bs = tape.gather_elems(b, &order)?;
                    let ds = tape.gather_elems(d, &order)?;
                    let t = view.apply(tape, bs, ds)?;
                    cols.push(tape.segment_sum_rows(t, m)?);
                }
                None => {
                    let q = view.q(tape);
                    cols.push(tape.constant(&[1, q], vec![0.0; q])?);
                }
            }
        }
        let stacked = tape.concat_cols(&cols)?;
        let lin = tape.matmul(stacked, self.global_w)?;
        tape.add(lin, self.global_b)
    }

    /// Residual fusion: attention features plus per-node topology plus the
    /// broadcast global topology vector.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        z: TensorRef,
        per_node: TensorRef,
        global: TensorRef,
    ) -> Result<TensorRef> {
        if tape.shape(z) != tape.shape(per_node) {
            return Err(Error::Contract(format!(
                "fusion shapes differ: {:?} vs {:?}",
                tape.shape(z),
                tape.shape(per_node)
            )));
        }
        let zp = tape.add(z, per_node)?;
        tape.add(zp, global)
    }
}
