//! Exact set operations on oriented boxes.
//!
//! Intersection volume comes from clipping one box's polytope against the
//! other's six half-spaces (3D Sutherland-Hodgman). The voxel oracle is an
//! independent rasterized estimate used only to cross-check the exact path.

use nalgebra::{Matrix3, Vector3};

use crate::box_core::BoxParams;

type V3 = Vector3<f64>;

/// Dimensions below this are treated as zero.
pub const DEGENERATE_DIM: f64 = 1e-9;

const PLANE_EPS: f64 = 1e-12;

/// Half-space `normal . x <= offset`.
#[derive(Clone, Copy, Debug)]
pub struct HalfSpace {
    pub normal: V3,
    pub offset: f64,
}

impl HalfSpace {
    fn signed(&self, p: &V3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// The six outward half-spaces of a box.
pub fn half_spaces(b: &BoxParams) -> [HalfSpace; 6] {
    let r = b.rotation();
    let c = b.center_vec();
    std::array::from_fn(|i| {
        let axis = i / 2;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let normal: V3 = r.matrix().column(axis) * sign;
        HalfSpace {
            normal,
            offset: normal.dot(&c) + 0.5 * b.dims[axis],
        }
    })
}

/// Closed convex polytope stored as outward-oriented polygonal faces.
#[derive(Clone, Debug, Default)]
pub struct ConvexPolytope {
    faces: Vec<Vec<V3>>,
}

impl ConvexPolytope {
    pub fn from_box(b: &BoxParams) -> Self {
        let c = b.corners();
        // Corner index bits: 1 -> +x, 2 -> +y, 4 -> +z. Each face is listed
        // counter-clockwise when seen from outside.
        const FACES: [[usize; 4]; 6] = [
            [1, 3, 7, 5],
            [0, 4, 6, 2],
            [2, 6, 7, 3],
            [0, 1, 5, 4],
            [4, 5, 7, 6],
            [0, 2, 3, 1],
        ];
        Self {
            faces: FACES.iter().map(|f| f.iter().map(|&i| c[i]).collect()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn faces(&self) -> &[Vec<V3>] {
        &self.faces
    }

    pub fn vertices(&self) -> impl Iterator<Item = &V3> {
        self.faces.iter().flatten()
    }

    /// Keeps the part with `normal . x <= offset`.
    pub fn clip(&self, hs: &HalfSpace) -> Self {
        if self.is_empty() {
            return Self::default();
        }
        let scale = self.vertices().map(|v| v.amax()).fold(hs.offset.abs(), f64::max);
        let eps = PLANE_EPS * scale.max(1.0);
        let mut any_out = false;
        let mut any_in = false;
        for v in self.vertices() {
            let s = hs.signed(v);
            any_out |= s > eps;
            any_in |= s < -eps;
        }
        if !any_out {
            return self.clone();
        }
        if !any_in {
            return Self::default();
        }

        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        let mut cap: Vec<V3> = Vec::new();
        for face in &self.faces {
            let mut out = Vec::with_capacity(face.len() + 1);
            for (i, p) in face.iter().enumerate() {
                let q = &face[(i + 1) % face.len()];
                let sp = hs.signed(p);
                let sq = hs.signed(q);
                if sp <= eps {
                    out.push(*p);
                    if sp.abs() <= eps {
                        cap.push(*p);
                    }
                }
                if (sp < -eps && sq > eps) || (sp > eps && sq < -eps) {
                    let t = sp / (sp - sq);
                    let x = p + (q - p) * t;
                    out.push(x);
                    cap.push(x);
                }
            }
            if out.len() >= 3 {
                faces.push(out);
            }
        }
        if let Some(face) = order_cap(cap, &hs.normal, eps) {
            faces.push(face);
        }
        Self { faces }
    }

    pub fn volume(&self) -> f64 {
        let n: usize = self.faces.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        let r = self.vertices().sum::<V3>() / n as f64;
        let mut six_v = 0.0;
        for f in &self.faces {
            let a = f[0] - r;
            for w in f[1..].windows(2) {
                six_v += a.dot(&(w[0] - r).cross(&(w[1] - r)));
            }
        }
        (six_v / 6.0).max(0.0)
    }
}

/// Orders points lying on a plane counter-clockwise around `normal`,
/// dropping near-duplicates. `None` when fewer than three remain.
fn order_cap(mut pts: Vec<V3>, normal: &V3, eps: f64) -> Option<Vec<V3>> {
    let mut uniq: Vec<V3> = Vec::with_capacity(pts.len());
    for p in pts.drain(..) {
        if !uniq.iter().any(|u| (u - p).amax() <= 10.0 * eps) {
            uniq.push(p);
        }
    }
    if uniq.len() < 3 {
        return None;
    }
    let centroid = uniq.iter().sum::<V3>() / uniq.len() as f64;
    let helper = if normal.x.abs() < 0.9 { V3::x() } else { V3::y() };
    let u = normal.cross(&helper).normalize();
    let v = normal.cross(&u);
    let mut keyed: Vec<(f64, V3)> = uniq
        .into_iter()
        .map(|p| {
            let d = p - centroid;
            (d.dot(&v).atan2(d.dot(&u)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(keyed.into_iter().map(|(_, p)| p).collect())
}

/// Volume of `a ∩ b` in cubic meters.
pub fn intersection_volume(a: &BoxParams, b: &BoxParams) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    if !aabb_overlap(a, b) {
        return 0.0;
    }
    let mut poly = ConvexPolytope::from_box(a);
    for hs in half_spaces(b) {
        poly = poly.clip(&hs);
        if poly.is_empty() {
            return 0.0;
        }
    }
    poly.volume().min(a.volume()).min(b.volume())
}

fn aabb(b: &BoxParams) -> (V3, V3) {
    let c = b.corners();
    let mut lo = c[0];
    let mut hi = c[0];
    for p in &c[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn aabb_overlap(a: &BoxParams, b: &BoxParams) -> bool {
    let (alo, ahi) = aabb(a);
    let (blo, bhi) = aabb(b);
    (0..3).all(|i| alo[i] <= bhi[i] && blo[i] <= ahi[i])
}

pub fn iou(a: &BoxParams, b: &BoxParams) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection-over-ground-truth with a flag for degenerate ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IogValue {
    pub value: f64,
    /// The ground truth had a dimension below [`DEGENERATE_DIM`]; the value
    /// was computed on the limiting lower-dimensional slab.
    pub degenerate_gt: bool,
}

/// Fraction of `gt` covered by `pred`.
pub fn iog(pred: &BoxParams, gt: &BoxParams) -> f64 {
    iog_checked(pred, gt).value
}

pub fn iog_checked(pred: &BoxParams, gt: &BoxParams) -> IogValue {
    if !gt.is_degenerate() {
        let v = gt.volume();
        let value = if pred.is_degenerate() {
            0.0
        } else {
            (intersection_volume(pred, gt) / v).clamp(0.0, 1.0)
        };
        return IogValue {
            value,
            degenerate_gt: false,
        };
    }
    IogValue {
        value: degenerate_coverage(pred, gt),
        degenerate_gt: true,
    }
}

/// Coverage of a flat, segment-like or point-like ground truth by `pred`,
/// measured in the measure of the ground truth's own dimension.
fn degenerate_coverage(pred: &BoxParams, gt: &BoxParams) -> f64 {
    let frame = BoxFrame::new(pred);
    if gt.corners().iter().all(|c| frame.contains(c)) {
        return 1.0;
    }
    if pred.is_degenerate() {
        return 0.0;
    }
    let live: Vec<usize> = (0..3).filter(|&i| gt.dims[i] >= DEGENERATE_DIM).collect();
    let r = gt.rotation();
    let c = gt.center_vec();
    let planes = half_spaces(pred);
    match live.len() {
        2 => {
            // Rectangle: clip the polygon in its own plane.
            let (u, v) = (live[0], live[1]);
            let au: V3 = r.matrix().column(u) * (0.5 * gt.dims[u]);
            let av: V3 = r.matrix().column(v) * (0.5 * gt.dims[v]);
            let mut poly = vec![c - au - av, c + au - av, c + au + av, c - au + av];
            for hs in &planes {
                poly = clip_polygon(&poly, hs);
                if poly.len() < 3 {
                    return 0.0;
                }
            }
            let full = gt.dims[u] * gt.dims[v];
            (polygon_area(&poly) / full).clamp(0.0, 1.0)
        }
        1 => {
            let a = live[0];
            let dir: V3 = r.matrix().column(a).into_owned();
            let half = 0.5 * gt.dims[a];
            let (mut t0, mut t1) = (-half, half);
            for hs in &planes {
                let s0 = hs.signed(&c);
                let ds = hs.normal.dot(&dir);
                if ds.abs() < 1e-15 {
                    if s0 > 0.0 {
                        return 0.0;
                    }
                } else if ds > 0.0 {
                    t1 = t1.min(-s0 / ds);
                } else {
                    t0 = t0.max(-s0 / ds);
                }
            }
            ((t1 - t0).max(0.0) / gt.dims[a]).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

fn clip_polygon(poly: &[V3], hs: &HalfSpace) -> Vec<V3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (i, p) in poly.iter().enumerate() {
        let q = &poly[(i + 1) % poly.len()];
        let sp = hs.signed(p);
        let sq = hs.signed(q);
        if sp <= 0.0 {
            out.push(*p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            out.push(p + (q - p) * (sp / (sp - sq)));
        }
    }
    out
}

fn polygon_area(poly: &[V3]) -> f64 {
    let mut acc = V3::zeros();
    for w in poly[1..].windows(2) {
        acc += (w[0] - poly[0]).cross(&(w[1] - poly[0]));
    }
    0.5 * acc.norm()
}

/// Precomputed local frame for repeated containment tests.
#[derive(Clone, Copy, Debug)]
pub struct BoxFrame {
    center: V3,
    /// Rows are the box axes, so `axes * (x - c)` is the local coordinate.
    axes: Matrix3<f64>,
    half: V3,
    tol: f64,
}

impl BoxFrame {
    pub fn new(b: &BoxParams) -> Self {
        let half = V3::from(b.dims) * 0.5;
        let center = b.center_vec();
        let scale = half.amax().max(center.amax()).max(1.0);
        Self {
            center,
            axes: b.rotation().matrix().transpose(),
            half,
            tol: 1e-9 * scale,
        }
    }

    /// Boundary inclusive, with a relative tolerance of `1e-9`.
    #[inline]
    pub fn contains(&self, x: &V3) -> bool {
        let local = self.axes * (x - self.center);
        local.x.abs() <= self.half.x + self.tol
            && local.y.abs() <= self.half.y + self.tol
            && local.z.abs() <= self.half.z + self.tol
    }

    pub fn local(&self, x: &V3) -> V3 {
        self.axes * (x - self.center)
    }
}

/// True iff `|R^T (x - c)| <= d / 2` component-wise.
pub fn contains_point(b: &BoxParams, x: [f64; 3]) -> bool {
    BoxFrame::new(b).contains(&V3::from(x))
}

/// Grid estimate of `(iou(a, b), iog(a, b))`.
///
/// The union's axis-aligned bounding box is split into `resolution` cells
/// per axis and each box is rasterized by counting the cell centers it
/// contains. Each `(y, z)` row of cells is handled in closed form because a
/// box cuts a straight line in a single interval.
pub fn voxel_iou_oracle(a: &BoxParams, b: &BoxParams, resolution: usize) -> (f64, f64) {
    assert!(resolution >= 16, "voxel oracle needs resolution >= 16");
    let (alo, ahi) = aabb(a);
    let (blo, bhi) = aabb(b);
    let lo = alo.inf(&blo);
    let hi = ahi.sup(&bhi);
    let step = (hi - lo) / resolution as f64;
    let fa = BoxFrame::new(a);
    let fb = BoxFrame::new(b);
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for iz in 0..resolution {
        let z = lo.z + (iz as f64 + 0.5) * step.z;
        for iy in 0..resolution {
            let y = lo.y + (iy as f64 + 0.5) * step.y;
            let ra = row_cells(&fa, y, z, lo.x, step.x, resolution);
            let rb = row_cells(&fb, y, z, lo.x, step.x, resolution);
            na += span_len(ra);
            nb += span_len(rb);
            if let (Some((a0, a1)), Some((b0, b1))) = (ra, rb) {
                nab += span_len(Some((a0.max(b0), a1.min(b1))));
            }
        }
    }
    let union = na + nb - nab;
    let iou = if union == 0 { 0.0 } else { nab as f64 / union as f64 };
    let iog = if nb == 0 { 0.0 } else { nab as f64 / nb as f64 };
    (iou, iog)
}

fn span_len(s: Option<(i64, i64)>) -> u64 {
    match s {
        Some((i0, i1)) if i1 >= i0 => (i1 - i0 + 1) as u64,
        _ => 0,
    }
}

/// Inclusive range of x-cell indices whose centers fall inside the box on
/// the row `(y, z)`.
fn row_cells(f: &BoxFrame, y: f64, z: f64, x0: f64, dx: f64, n: usize) -> Option<(i64, i64)> {
    let base = V3::new(0.0, y, z) - f.center;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let row = f.axes.row(k);
        let slope = row[0];
        let off = row[1] * base.y + row[2] * base.z + row[0] * base.x;
        let h = f.half[k];
        if slope.abs() < 1e-15 {
            if off.abs() > h {
                return None;
            }
        } else {
            let (ta, tb) = ((-h - off) / slope, (h - off) / slope);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return None;
    }
    // Cell i has center x0 + (i + 0.5) dx.
    let i0 = ((t0 - x0) / dx - 0.5).ceil().max(0.0) as i64;
    let i1 = ((t1 - x0) / dx - 0.5).floor().min(n as f64 - 1.0) as i64;
    (i1 >= i0).then_some((i0, i1))
}
