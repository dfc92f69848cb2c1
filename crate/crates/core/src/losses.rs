//! Detection losses: focal center loss with hard negatives, min/max point-box
//! regression, the surface triplet loss, and their weighted combination.

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::targets::HeatmapTarget;
use crate::tensor::{Elem, Tape, Tensor};

/// Focal-loss exponent on the prediction error at center cells.
pub const FOCAL_ALPHA: f64 = 2.0;
/// Focal-loss exponent on (1 - Y) away from centers; a hard-negative cell
/// at Y = -1 is amplified by 2^4 = 16 over a neutral cell.
pub const FOCAL_BETA: f64 = 4.0;
/// Triplet margin of Eq-style hinge `max(0, d_pos - d_neg + 1)`.
pub const TRIPLET_MARGIN: f64 = 1.0;
/// Keeps embedding-distance gradients finite when two points coincide.
const NORM_EPS: f64 = 1e-12;

/// How the triplet sum is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriNormalization {
    /// Divide by the lesion count `m` (literal formula).
    Lesions,
    /// Divide by `m * 8n` as well (per-term mean).
    LesionsPoints,
}

impl TriNormalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lesions" => Ok(TriNormalization::Lesions),
            "lesions_points" => Ok(TriNormalization::LesionsPoints),
            other => Err(Error::Config(format!(
                "unknown triplet normalization '{other}' (expected lesions|lesions_points)"
            ))),
        }
    }
}

fn add_all<T: Elem>(tape: &mut Tape<T>, terms: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Argument("empty term list".into()))?;
    for t in it {
        acc = tape.add(&acc, &t)?;
    }
    Ok(acc)
}

/// Focal center loss over the sigmoid heatmap `yhat` against a target map.
///
/// Center cells (Y == 1) contribute `(1 - yhat)^alpha * log(yhat)`; all other
/// cells contribute `(1 - Y)^beta * yhat^alpha * log(1 - yhat)`. The sum is
/// negated and divided by `max(m, 1)`. `yhat` is clamped to
/// `[eps, 1 - eps]` before the logs.
pub fn focal_center_loss<T: Elem>(
    tape: &mut Tape<T>,
    yhat: &Tensor<T>,
    target: &HeatmapTarget<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if yhat.shape() != target.y.shape() {
        return Err(Error::Dimension(format!(
            "heatmap shape {:?} vs target {:?}",
            yhat.shape(),
            target.y.shape()
        )));
    }
    let one = T::one();
    let center_mask: Vec<T> =
        target.y.data().iter().map(|&v| if v == one { one } else { T::zero() }).collect();
    let neg_weight: Vec<T> = target
        .y
        .data()
        .iter()
        .zip(&center_mask)
        .map(|(&y, &c)| {
            if c == one {
                T::zero()
            } else {
                (one - y).powf(T::from_f64(FOCAL_BETA))
            }
        })
        .collect();
    let center_mask = Tensor::from_vec(yhat.shape(), center_mask)?;
    let neg_weight = Tensor::from_vec(yhat.shape(), neg_weight)?;

    let yc = tape.clamp(yhat, eps, 1.0 - eps);
    let one_minus = tape.affine(&yc, -1.0, 1.0);

    let log_y = tape.log(&yc)?;
    let pos_pow = tape.pow_const(&one_minus, FOCAL_ALPHA);
    let pos = tape.mul(&pos_pow, &log_y)?;
    let pos = tape.mul(&pos, &center_mask)?;

    let log_1m = tape.log(&one_minus)?;
    let neg_pow = tape.pow_const(&yc, FOCAL_ALPHA);
    let neg = tape.mul(&neg_pow, &log_1m)?;
    let neg = tape.mul(&neg, &neg_weight)?;

    let both = tape.add(&pos, &neg)?;
    let total = tape.sum(&both);
    Ok(tape.affine(&total, -1.0 / target.m.max(1) as f64, 0.0))
}

/// Per-axis L1 distances between the ground-truth extremes and the min/max
/// coordinates of both point sets (coordinates in voxel units). Subgradients
/// flow only through the arg-extreme points.
pub fn point_box_loss<T: Elem>(
    tape: &mut Tape<T>,
    points: &Tensor<T>,
    refined: &Tensor<T>,
    gt: &Box3D,
) -> Result<Tensor<T>> {
    for t in [points, refined] {
        match t.shape() {
            [n, 3] if *n >= 1 => {}
            other => {
                return Err(Error::Dimension(format!("point set must be [n,3], got {other:?}")))
            }
        }
    }
    let mut terms = Vec::with_capacity(12);
    for set in [points, refined] {
        for axis in 0..3 {
            let col = tape.column(set, axis)?;
            let mm = tape.reduce_min_max(&col)?;
            let dmin = tape.affine(&mm.min, 1.0, -gt.min[axis]);
            terms.push(tape.abs(&dmin));
            let dmax = tape.affine(&mm.max, 1.0, -gt.max[axis]);
            terms.push(tape.abs(&dmax));
        }
    }
    add_all(tape, terms)
}

/// Triplet loss over point-wise embeddings: the lesion-center embedding is
/// the positive anchor, the 8 box-corner embeddings are negative anchors.
/// `sum_k sum_j max(0, ||a_p - a_k|| - ||a_p - a_nj|| + 1)`, normalized per
/// `norm`. With `m == 0` the loss is zero.
pub fn surface_triplet_loss<T: Elem>(
    tape: &mut Tape<T>,
    center: &Tensor<T>,
    corners: &Tensor<T>,
    points: &Tensor<T>,
    m: usize,
    norm: TriNormalization,
) -> Result<Tensor<T>> {
    if m == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let embed = match center.shape() {
        [1, e] | [e] => *e,
        other => return Err(Error::Dimension(format!("center embedding shape {other:?}"))),
    };
    let (n_corners, n_points) = match (corners.shape(), points.shape()) {
        ([8, ec], [n, ep]) if *ec == embed && *ep == embed => (8usize, *n),
        _ => {
            return Err(Error::Dimension(format!(
                "embedding dims disagree: center {:?}, corners {:?}, points {:?}",
                center.shape(),
                corners.shape(),
                points.shape()
            )))
        }
    };

    let a_p = center.reshape(&[embed])?;
    let dist_to = |tape: &mut Tape<T>, set: &Tensor<T>, row: usize| -> Result<Tensor<T>> {
        let r = tape.rows(set, row, 1)?.reshape(&[embed])?;
        let diff = tape.sub(&a_p, &r)?;
        let sq = tape.mul(&diff, &diff)?;
        let s = tape.sum(&sq);
        let s = tape.affine(&s, 1.0, NORM_EPS);
        Ok(tape.sqrt(&s))
    };

    let mut d_neg = Vec::with_capacity(n_corners);
    for j in 0..n_corners {
        d_neg.push(dist_to(tape, corners, j)?);
    }
    let mut terms = Vec::with_capacity(n_points * n_corners);
    for k in 0..n_points {
        let d_pos = dist_to(tape, points, k)?;
        for dn in &d_neg {
            let z = tape.sub(&d_pos, dn)?;
            let z = tape.affine(&z, 1.0, TRIPLET_MARGIN);
            terms.push(tape.relu(&z));
        }
    }
    let total = add_all(tape, terms)?;
    let denom = match norm {
        TriNormalization::Lesions => m as f64,
        TriNormalization::LesionsPoints => (m * 8 * n_points) as f64,
    };
    Ok(tape.affine(&total, 1.0 / denom, 0.0))
}

/// L1 loss between predicted per-axis extents and the ground-truth extents,
/// for the direct center-feature regression baseline.
pub fn size_l1_loss<T: Elem>(
    tape: &mut Tape<T>,
    pred_extents: &Tensor<T>,
    gt_extents: [f64; 3],
) -> Result<Tensor<T>> {
    if pred_extents.len() != 3 {
        return Err(Error::Dimension(format!(
            "size prediction must have 3 values, got {:?}",
            pred_extents.shape()
        )));
    }
    let flat = pred_extents.reshape(&[1, 3])?;
    let mut terms = Vec::with_capacity(3);
    for axis in 0..3 {
        let c = tape.column(&flat, axis)?;
        let d = tape.affine(&c, 1.0, -gt_extents[axis]);
        terms.push(tape.abs(&d));
    }
    add_all(tape, terms)
}

/// `L = L_ctr + aux_weight * (L_pts + L_tri)`; rejects non-finite inputs.
pub fn joint_loss<T: Elem>(
    tape: &mut Tape<T>,
    l_ctr: &Tensor<T>,
    l_pts: &Tensor<T>,
    l_tri: &Tensor<T>,
    aux_weight: f64,
) -> Result<Tensor<T>> {
    for (name, l) in [("L_ctr", l_ctr), ("L_pts", l_pts), ("L_tri", l_tri)] {
        let v = l.item()?;
        if !v.is_finite() {
            return Err(Error::Train(format!("{name} is not finite: {v}")));
        }
    }
    let aux = tape.add(l_pts, l_tri)?;
    let aux = tape.affine(&aux, aux_weight, 0.0);
    tape.add(l_ctr, &aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{GridMap, GroundTruthBox};
    use crate::targets::make_heatmap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-4;

    fn single_cell_target(y_value: f64) -> HeatmapTarget<f64> {
        let mut t = make_heatmap::<f64>(&[], [1, 1, 1], &GridMap::new(1, 1)).unwrap();
        t.y = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![y_value]).unwrap();
        if y_value == 1.0 {
            t.m = 1;
        }
        t
    }

    #[test]
    fn perfect_prediction_is_near_zero_loss() {
        let gt = GroundTruthBox::positive(
            Box3D::new([12.0, 12.0, 6.0], [20.0, 20.0, 10.0]).unwrap(),
        );
        let grid = GridMap::new(2, 4);
        let target = make_heatmap::<f64>(&[gt], [8, 8, 8], &grid).unwrap();
        // yhat == 1-eps at the center, eps elsewhere, and the target Gaussian
        // shoulders are ignored by a prediction matching them; emulate the
        // spec case with a target that is 1 at center and 0 elsewhere.
        let mut flat = vec![EPS; target.y.len()];
        let c = &target.centers[0];
        flat[(c.cell[0] * 8 + c.cell[1]) * 8 + c.cell[2]] = 1.0 - EPS;
        let mut zeroed = single_cell_target(0.0);
        let mut ydata = vec![0.0; target.y.len()];
        ydata[(c.cell[0] * 8 + c.cell[1]) * 8 + c.cell[2]] = 1.0;
        zeroed.y = Tensor::from_vec(target.y.shape(), ydata).unwrap();
        zeroed.m = 1;
        let mut tape = Tape::<f64>::new();
        let yhat = Tensor::from_vec(target.y.shape(), flat).unwrap();
        let loss = focal_center_loss(&mut tape, &yhat, &zeroed, EPS).unwrap();
        assert!(loss.item().unwrap() < 1e-4, "loss = {}", loss.item().unwrap());
    }

    #[test]
    fn background_cell_matches_hand_formula() {
        let target = single_cell_target(0.0);
        let mut tape = Tape::<f64>::new();
        let yhat = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.5]).unwrap();
        let loss = focal_center_loss(&mut tape, &yhat, &target, EPS).unwrap();
        let want = -(1.0f64) * 0.25 * 0.5f64.ln();
        assert!((loss.item().unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn hard_negative_amplifies_by_sixteen() {
        let neutral = single_cell_target(0.0);
        let hard = single_cell_target(-1.0);
        let mut tape = Tape::<f64>::new();
        let yhat = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.5]).unwrap();
        let l0 = focal_center_loss(&mut tape, &yhat, &neutral, EPS).unwrap().item().unwrap();
        let l1 = focal_center_loss(&mut tape, &yhat, &hard, EPS).unwrap().item().unwrap();
        assert!((l1 / l0 - 16.0).abs() < 1e-9, "ratio = {}", l1 / l0);
    }

    #[test]
    fn focal_loss_decreases_as_center_prediction_improves() {
        let target = single_cell_target(1.0);
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.6, 0.9, 0.99] {
            let mut tape = Tape::<f64>::new();
            let yhat = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![p]).unwrap();
            let l = focal_center_loss(&mut tape, &yhat, &target, EPS).unwrap().item().unwrap();
            assert!(l >= 0.0);
            assert!(l < prev, "loss should fall as p rises: {l} vs {prev}");
            prev = l;
        }
    }

    fn points_tensor(vals: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_vec(&[vals.len(), 3], vals.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn point_box_loss_zero_when_extremes_match() {
        let gt = Box3D::new([0.0, 1.0, 2.0], [10.0, 11.0, 12.0]).unwrap();
        let pts = points_tensor(&[[0.0, 1.0, 2.0], [10.0, 11.0, 12.0], [5.0, 6.0, 7.0]]);
        let mut tape = Tape::<f64>::new();
        let l = point_box_loss(&mut tape, &pts, &pts, &gt).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn point_box_loss_one_axis_arithmetic() {
        // x in [0, 10], points span [1, 9]; other axes match exactly.
        let gt = Box3D::new([0.0, 0.0, 0.0], [10.0, 5.0, 5.0]).unwrap();
        let pts = points_tensor(&[[1.0, 0.0, 0.0], [9.0, 5.0, 5.0]]);
        let mut tape = Tape::<f64>::new();
        let l = point_box_loss(&mut tape, &pts, &pts, &gt).unwrap();
        assert!((l.item().unwrap() - 4.0).abs() < 1e-12);
    }

    /// Independent re-implementation of the min/max matching formula.
    fn point_box_oracle(p: &[[f64; 3]], r: &[[f64; 3]], gt: &Box3D) -> f64 {
        let mut total = 0.0;
        for set in [p, r] {
            for a in 0..3 {
                let min = set.iter().map(|q| q[a]).fold(f64::INFINITY, f64::min);
                let max = set.iter().map(|q| q[a]).fold(f64::NEG_INFINITY, f64::max);
                total += (gt.min[a] - min).abs() + (gt.max[a] - max).abs();
            }
        }
        total
    }

    #[test]
    fn point_box_loss_matches_second_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..25 {
            let p: Vec<[f64; 3]> = (0..7)
                .map(|_| std::array::from_fn(|_| rng.random_range(-5.0..15.0)))
                .collect();
            let r: Vec<[f64; 3]> = (0..7)
                .map(|_| std::array::from_fn(|_| rng.random_range(-5.0..15.0)))
                .collect();
            let gt = Box3D::new([0.0, -1.0, 2.0], [9.0, 8.0, 11.0]).unwrap();
            let mut tape = Tape::<f64>::new();
            let l = point_box_loss(&mut tape, &points_tensor(&p), &points_tensor(&r), &gt)
                .unwrap()
                .item()
                .unwrap();
            let want = point_box_oracle(&p, &r, &gt);
            assert!((l - want).abs() <= 1e-7 * want.max(1.0));
        }
    }

    #[test]
    fn point_box_loss_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p: Vec<[f64; 3]> =
            (0..5).map(|_| std::array::from_fn(|_| rng.random_range(0.0..10.0))).collect();
        let gt = Box3D::new([1.0, 1.0, 1.0], [8.0, 9.0, 7.0]).unwrap();
        let shift = [3.5, -2.0, 1.25];
        let shifted: Vec<[f64; 3]> =
            p.iter().map(|q| std::array::from_fn(|a| q[a] + shift[a])).collect();
        let gt_shift = Box3D::new(
            std::array::from_fn(|a| gt.min[a] + shift[a]),
            std::array::from_fn(|a| gt.max[a] + shift[a]),
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let a = point_box_loss(&mut tape, &points_tensor(&p), &points_tensor(&p), &gt)
            .unwrap()
            .item()
            .unwrap();
        let b = point_box_loss(
            &mut tape,
            &points_tensor(&shifted),
            &points_tensor(&shifted),
            &gt_shift,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    fn embed(vals: &[f64], rows: usize) -> Tensor<f64> {
        Tensor::from_vec(&[rows, vals.len() / rows], vals.to_vec()).unwrap()
    }

    #[test]
    fn triplet_zero_when_hinge_inactive() {
        // a_k == a_p, corners at distance >= 1+margin.
        let e = 4;
        let a_p = Tensor::from_vec(&[1, e], vec![0.0; e]).unwrap();
        let points = Tensor::from_vec(&[3, e], vec![0.0; 3 * e]).unwrap();
        let corners = embed(&vec![5.0; 8 * e], 8);
        let mut tape = Tape::<f64>::new();
        let l =
            surface_triplet_loss(&mut tape, &a_p, &corners, &points, 1, TriNormalization::Lesions)
                .unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn triplet_all_identical_embeddings_gives_eight_n_over_m() {
        let e = 6;
        let n = 5;
        let a_p = Tensor::from_vec(&[1, e], vec![0.25; e]).unwrap();
        let points = Tensor::from_vec(&[n, e], vec![0.25; n * e]).unwrap();
        let corners = Tensor::from_vec(&[8, e], vec![0.25; 8 * e]).unwrap();
        for m in [1usize, 2] {
            let mut tape = Tape::<f64>::new();
            let l = surface_triplet_loss(
                &mut tape,
                &a_p,
                &corners,
                &points,
                m,
                TriNormalization::Lesions,
            )
            .unwrap();
            let want = 8.0 * n as f64 / m as f64;
            assert!((l.item().unwrap() - want).abs() < 1e-9);
        }
    }

    /// Plain double-loop oracle for the triplet formula.
    fn triplet_oracle(a_p: &[f64], corners: &[Vec<f64>], points: &[Vec<f64>], m: usize) -> f64 {
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut total = 0.0;
        for k in points {
            for j in corners {
                total += (dist(a_p, k) - dist(a_p, j) + 1.0).max(0.0);
            }
        }
        total / m as f64
    }

    #[test]
    fn triplet_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e = 16;
        for trial in 0..20 {
            let a_p: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let corners: Vec<Vec<f64>> =
                (0..8).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let points: Vec<Vec<f64>> =
                (0..6).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let m = 1 + trial % 3;
            let mut tape = Tape::<f64>::new();
            let l = surface_triplet_loss(
                &mut tape,
                &Tensor::from_vec(&[1, e], a_p.clone()).unwrap(),
                &Tensor::from_vec(&[8, e], corners.concat()).unwrap(),
                &Tensor::from_vec(&[6, e], points.concat()).unwrap(),
                m,
                TriNormalization::Lesions,
            )
            .unwrap()
            .item()
            .unwrap();
            let want = triplet_oracle(&a_p, &corners, &points, m);
            assert!((l - want).abs() <= 1e-7 * want.max(1.0), "{l} vs {want}");
        }
    }

    #[test]
    fn triplet_invariant_to_point_and_corner_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let e = 8;
        let a_p: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let corners: Vec<Vec<f64>> =
            (0..8).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let points: Vec<Vec<f64>> =
            (0..5).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let eval = |cs: &[Vec<f64>], ps: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            surface_triplet_loss(
                &mut tape,
                &Tensor::from_vec(&[1, e], a_p.clone()).unwrap(),
                &Tensor::from_vec(&[8, e], cs.concat()).unwrap(),
                &Tensor::from_vec(&[5, e], ps.concat()).unwrap(),
                1,
                TriNormalization::Lesions,
            )
            .unwrap()
            .item()
            .unwrap()
        };
        let base = eval(&corners, &points);
        let mut cs = corners.clone();
        cs.reverse();
        let mut ps = points.clone();
        ps.rotate_left(2);
        assert!((eval(&cs, &ps) - base).abs() < 1e-9);
    }

    #[test]
    fn triplet_m_zero_returns_zero() {
        let e = 4;
        let mut tape = Tape::<f64>::new();
        let l = surface_triplet_loss(
            &mut tape,
            &Tensor::from_vec(&[1, e], vec![0.0; e]).unwrap(),
            &Tensor::from_vec(&[8, e], vec![0.0; 8 * e]).unwrap(),
            &Tensor::from_vec(&[2, e], vec![0.0; 2 * e]).unwrap(),
            0,
            TriNormalization::Lesions,
        )
        .unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn joint_loss_weighted_sum_and_finiteness() {
        let mut tape = Tape::<f64>::new();
        let l = joint_loss(
            &mut tape,
            &Tensor::scalar(1.0),
            &Tensor::scalar(2.0),
            &Tensor::scalar(3.0),
            0.1,
        )
        .unwrap();
        assert!((l.item().unwrap() - 1.5).abs() < 1e-12);

        let z = joint_loss(
            &mut tape,
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            0.1,
        )
        .unwrap();
        assert_eq!(z.item().unwrap(), 0.0);

        let err = joint_loss(
            &mut tape,
            &Tensor::scalar(f64::NAN),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            0.1,
        );
        assert!(matches!(err, Err(Error::Train(_))));
    }
}
