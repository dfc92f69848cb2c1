//! Finite-difference gradient checking.
//!
//! Central differences at `h = 1e-5` in f64 against the tape's analytic
//! gradients. Random instances are constructed (rejection-sampled) so every
//! non-smooth point — abs/hinge kinks, min/max argument switches, clamp
//! bounds, interpolation cell borders — stays farther from the evaluation
//! point than the FD step can reach, keeping the oracle valid at the stated
//! tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{Box3D, GridMap, GroundTruthBox};
use crate::error::Result;
use crate::losses;
use crate::losses::TriNormalization;
use crate::targets::make_heatmap;
use crate::tensor::{ConvGeom, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor: where analytic and numeric gradients are both below
/// this magnitude, FD roundoff noise dominates the quotient, so the
/// comparison falls back to an absolute one at `REL_TOL * SCALE_FLOOR`.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Minimum distance between an evaluated coordinate and any kink.
const KINK_MARGIN: f64 = 1e-2;

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    /// (leaf index, coordinate) of the worst error.
    pub worst: (usize, usize),
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Compare the tape gradient of `build(leaves...)` against central finite
/// differences over every coordinate of every leaf.
pub fn check<F>(leaves: &[Tensor<f64>], build: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &tracked)?;
    tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = tracked.iter().map(|t| tape.grad_tensor(t)).collect();

    let eval = |leaves: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let tracked: Vec<Tensor<f64>> = leaves.iter().map(|t| tape.leaf(t)).collect();
        build(&mut tape, &tracked)?.item()
    };

    let mut out = CheckOutcome { max_rel_err: 0.0, worst: (0, 0) };
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for li in 0..leaves.len() {
        for ci in 0..leaves[li].len() {
            let x0 = leaves[li].data()[ci];
            let bump = |v: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
                let mut data = leaves[li].data().to_vec();
                data[ci] = v;
                work[li] = Tensor::from_vec(leaves[li].shape(), data)?;
                eval(work)
            };
            let fp = bump(x0 + FD_STEP, &mut work)?;
            let fm = bump(x0 - FD_STEP, &mut work)?;
            work[li] = leaves[li].clone();
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(analytic[li].data()[ci], numeric);
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = (li, ci);
            }
        }
    }
    Ok(out)
}

/// Result of one suite: worst relative error over `trials` random instances.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "[{}] {:<28} trials={:<4} max_rel_err={:.3e} (tol {:.0e})",
                if e.pass { "PASS" } else { "FAIL" },
                e.name,
                e.trials,
                e.max_rel_err,
                REL_TOL
            )?;
        }
        Ok(())
    }
}

fn run_entry<F>(name: &str, trials: usize, mut instance: F) -> Result<SuiteEntry>
where
    F: FnMut(u64) -> Result<CheckOutcome>,
{
    let mut worst = 0.0f64;
    for t in 0..trials {
        let out = instance(t as u64)?;
        worst = worst.max(out.max_rel_err);
    }
    Ok(SuiteEntry { name: name.into(), trials, max_rel_err: worst, pass: worst < REL_TOL })
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Per-axis coordinates of interleaved (x,y,z) rows all pairwise separated.
fn axis_gaps_ok(vals: &[f64], margin: f64) -> bool {
    for a in 0..3 {
        let mut axis: Vec<f64> = vals.iter().skip(a).step_by(3).copied().collect();
        axis.sort_by(f64::total_cmp);
        if axis.windows(2).any(|p| p[1] - p[0] < margin) {
            return false;
        }
    }
    true
}

/// Focal-loss instance: random logits over a small grid with one positive
/// lesion and one hard negative. Smooth everywhere.
fn check_focal(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E01 ^ seed.wrapping_mul(0x9E3779B9));
    let grid = GridMap::new(2, 4);
    let dims = [3usize, 4, 4];
    let pos = GroundTruthBox::positive(Box3D::new([2.0, 2.0, 0.5], [11.0, 12.0, 4.5]).unwrap());
    let neg =
        GroundTruthBox::hard_negative(Box3D::new([6.0, 6.0, 2.0], [14.0, 15.5, 5.0]).unwrap());
    let target = make_heatmap::<f64>(&[pos, neg], dims, &grid)?;
    let cells = dims.iter().product::<usize>();
    let logits = Tensor::from_vec(&[1, 1, 3, 4, 4], rand_vec(&mut rng, cells, -2.5, 2.5))?;
    check(&[logits], |tape, leaves| {
        let yhat = tape.sigmoid(&leaves[0]);
        losses::focal_center_loss(tape, &yhat, &target, 1e-4)
    })
}

/// Point-box instance: leaf points and refinement deltas; both P and P+delta
/// keep per-axis gaps so argmin/argmax stay stable under the FD step.
fn check_point_box(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E04 ^ seed.wrapping_mul(0x9E3779B9));
    let n = 6usize;
    let gt = Box3D::new(
        [rng.random_range(-1.0..0.0), rng.random_range(-1.0..0.0), rng.random_range(-1.0..0.0)],
        [rng.random_range(9.0..10.0), rng.random_range(9.0..10.0), rng.random_range(9.0..10.0)],
    )
    .unwrap();
    let (p, d) = loop {
        let p = rand_vec(&mut rng, 3 * n, 0.5, 8.5);
        let d = rand_vec(&mut rng, 3 * n, -0.2, 0.2);
        let refined: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + b).collect();
        if axis_gaps_ok(&p, KINK_MARGIN) && axis_gaps_ok(&refined, KINK_MARGIN) {
            break (p, d);
        }
    };
    let points = Tensor::from_vec(&[n, 3], p)?;
    let deltas = Tensor::from_vec(&[n, 3], d)?;
    check(&[points, deltas], |tape, leaves| {
        let refined = tape.add(&leaves[0], &leaves[1])?;
        losses::point_box_loss(tape, &leaves[0], &refined, &gt)
    })
}

/// Random embeddings rejected while any hinge argument or pairwise distance
/// sits within the kink margin.
fn triplet_instance(
    rng: &mut ChaCha8Rng,
    e: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    loop {
        let a_p = rand_vec(rng, e, -1.0, 1.0);
        let corners = rand_vec(rng, 8 * e, -1.0, 1.0);
        let points = rand_vec(rng, n * e, -1.0, 1.0);
        let dist = |v: &[f64]| -> Vec<f64> {
            v.chunks(e)
                .map(|r| r.iter().zip(&a_p).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        };
        let dn = dist(&corners);
        let dp = dist(&points);
        let safe = dn.iter().chain(dp.iter()).all(|&d| d > KINK_MARGIN)
            && dp
                .iter()
                .all(|&dpk| dn.iter().all(|&dnj| (dpk - dnj + 1.0).abs() > KINK_MARGIN));
        if safe {
            return (a_p, corners, points);
        }
    }
}

fn check_triplet(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E05 ^ seed.wrapping_mul(0x9E3779B9));
    let e = 8usize;
    let n = 4usize;
    let (a_p, corners, points) = triplet_instance(&mut rng, e, n);
    let m = 1 + (seed % 3) as usize;
    let a_p = Tensor::from_vec(&[1, e], a_p)?;
    let corners = Tensor::from_vec(&[8, e], corners)?;
    let points = Tensor::from_vec(&[n, e], points)?;
    check(&[a_p, corners, points], move |tape, leaves| {
        losses::surface_triplet_loss(
            tape,
            &leaves[0],
            &leaves[1],
            &leaves[2],
            m,
            TriNormalization::Lesions,
        )
    })
}

/// Joint-loss instance combining the three pieces over shared leaves.
fn check_joint(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E06 ^ seed.wrapping_mul(0x9E3779B9));
    let grid = GridMap::new(2, 4);
    let dims = [2usize, 3, 3];
    let pos = GroundTruthBox::positive(Box3D::new([1.0, 1.0, 0.2], [10.0, 10.0, 3.6]).unwrap());
    let target = make_heatmap::<f64>(&[pos], dims, &grid)?;
    let cells = dims.iter().product::<usize>();
    let logits = Tensor::from_vec(&[1, 1, 2, 3, 3], rand_vec(&mut rng, cells, -2.0, 2.0))?;
    let n = 4usize;
    let e = 6usize;
    let gt = Box3D::new([0.0, 0.0, 0.0], [8.0, 8.0, 8.0]).unwrap();
    let (p, d) = loop {
        let p = rand_vec(&mut rng, 3 * n, 0.5, 7.5);
        let d = rand_vec(&mut rng, 3 * n, -0.2, 0.2);
        let refined: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + b).collect();
        if axis_gaps_ok(&p, KINK_MARGIN) && axis_gaps_ok(&refined, KINK_MARGIN) {
            break (p, d);
        }
    };
    let points = Tensor::from_vec(&[n, 3], p)?;
    let deltas = Tensor::from_vec(&[n, 3], d)?;
    let (a_p, corners, embeds) = triplet_instance(&mut rng, e, n);
    let a_p = Tensor::from_vec(&[1, e], a_p)?;
    let corners = Tensor::from_vec(&[8, e], corners)?;
    let embeds = Tensor::from_vec(&[n, e], embeds)?;
    check(&[logits, points, deltas, a_p, corners, embeds], move |tape, leaves| {
        let yhat = tape.sigmoid(&leaves[0]);
        let l_ctr = losses::focal_center_loss(tape, &yhat, &target, 1e-4)?;
        let refined = tape.add(&leaves[1], &leaves[2])?;
        let l_pts = losses::point_box_loss(tape, &leaves[1], &refined, &gt)?;
        let l_tri = losses::surface_triplet_loss(
            tape,
            &leaves[3],
            &leaves[4],
            &leaves[5],
            1,
            TriNormalization::Lesions,
        )?;
        losses::joint_loss(tape, &l_ctr, &l_pts, &l_tri, 0.1)
    })
}

fn check_conv(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E10 ^ seed.wrapping_mul(0x9E3779B9));
    let input = Tensor::from_vec(&[1, 2, 3, 4, 4], rand_vec(&mut rng, 96, -1.0, 1.0))?;
    let kernel = Tensor::from_vec(&[2, 2, 2, 3, 3], rand_vec(&mut rng, 72, -1.0, 1.0))?;
    let bias = Tensor::from_vec(&[2], rand_vec(&mut rng, 2, -0.5, 0.5))?;
    let geom = ConvGeom::new([1, 1, 1], [0, 1, 1]);
    let weights = Tensor::from_vec(&[1, 2, 2, 4, 4], rand_vec(&mut rng, 64, -1.0, 1.0))?;
    check(&[input, kernel, bias], move |tape, leaves| {
        let y = tape.conv3d(&leaves[0], &leaves[1], Some(&leaves[2]), geom)?;
        let weighted = tape.mul(&y, &weights)?;
        Ok(tape.sum(&weighted))
    })
}

fn check_trilinear(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E11 ^ seed.wrapping_mul(0x9E3779B9));
    let feat = Tensor::from_vec(&[2, 3, 4, 4], rand_vec(&mut rng, 96, -1.0, 1.0))?;
    // Fractional parts kept away from cell borders.
    let coords: Vec<f64> = (0..5)
        .flat_map(|_| {
            [
                rng.random_range(0..3) as f64 + rng.random_range(0.1..0.9),
                rng.random_range(0..3) as f64 + rng.random_range(0.1..0.9),
                rng.random_range(0..2) as f64 + rng.random_range(0.1..0.9),
            ]
        })
        .collect();
    let coords = Tensor::from_vec(&[5, 3], coords)?;
    let weights = Tensor::from_vec(&[5, 2], rand_vec(&mut rng, 10, -1.0, 1.0))?;
    check(&[feat, coords], move |tape, leaves| {
        let s = tape.trilinear_sample(&leaves[0], &leaves[1])?;
        let weighted = tape.mul(&s, &weights)?;
        Ok(tape.sum(&weighted))
    })
}

/// Composite elementwise chain exercising the full op suite.
fn check_elementwise(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E12 ^ seed.wrapping_mul(0x9E3779B9));
    let n = 24usize;
    let (a, b, c) = loop {
        let a = rand_vec(&mut rng, n, -1.5, 1.5);
        let b = rand_vec(&mut rng, n, 0.3, 2.0);
        // Signed magnitudes keep abs(c) off its kink; sorted gaps keep the
        // min/max reduction stable.
        let c: Vec<f64> = (0..n)
            .map(|_| {
                let mag: f64 = rng.random_range(0.05..0.85);
                if rng.random_range(0..2) == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let mut sorted = c.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[1] - p[0] < KINK_MARGIN) {
            continue;
        }
        // Clamp input must stay away from both bounds.
        let clamp_in: Vec<f64> = a
            .iter()
            .zip(&b)
            .zip(&c)
            .map(|((&av, &bv), &cv)| {
                (1.0 / (1.0 + (-av).exp())) * bv.ln() + cv * cv + cv.abs()
            })
            .collect();
        if clamp_in.iter().any(|&v| (v + 1.2).abs() < KINK_MARGIN || (v - 1.7).abs() < KINK_MARGIN)
        {
            continue;
        }
        break (a, b, c);
    };
    let a = Tensor::from_vec(&[n], a)?;
    let b = Tensor::from_vec(&[n], b)?;
    let c = Tensor::from_vec(&[n], c)?;
    check(&[a, b, c], |tape, leaves| {
        let s = tape.sigmoid(&leaves[0]);
        let l = tape.log(&leaves[1])?;
        let p = tape.pow_const(&leaves[2], 2.0);
        let m = tape.mul(&s, &l)?;
        let t = tape.add(&m, &p)?;
        let ab = tape.abs(&leaves[2]);
        let both = tape.add(&t, &ab)?;
        let cl = tape.clamp(&both, -1.2, 1.7);
        let aff = tape.affine(&cl, 0.2, 1.0);
        let sq = tape.sqrt(&aff);
        let mm = tape.reduce_min_max(&leaves[2])?;
        let total = tape.sum(&sq);
        let total = tape.add(&total, &mm.max)?;
        tape.add(&total, &mm.min)
    })
}

/// The loss suites of the acceptance gate (100 instances each by default)
/// plus engine op checks.
pub fn run_suites(loss_trials: usize, op_trials: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    report.entries.push(run_entry("focal_center_loss", loss_trials, check_focal)?);
    report.entries.push(run_entry("point_box_loss", loss_trials, check_point_box)?);
    report.entries.push(run_entry("surface_triplet_loss", loss_trials, check_triplet)?);
    report.entries.push(run_entry("joint_loss", loss_trials, check_joint)?);
    report.entries.push(run_entry("conv3d", op_trials, check_conv)?);
    report.entries.push(run_entry("trilinear_sample", op_trials, check_trilinear)?);
    report.entries.push(run_entry("elementwise_suite", op_trials, check_elementwise)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_suites_pass() {
        let report = run_suites(5, 5).unwrap();
        assert!(report.all_pass(), "{report}");
    }

    /// x^2 recorded with a deliberately wrong backward rule (3x instead of
    /// 2x). Test fixture for the negative control.
    fn bad_square(tape: &mut Tape<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let out: Vec<f64> = x.data().iter().map(|v| v * v).collect();
        let nodes = tape.input_nodes(&[x])?;
        let xs = x.data_arc();
        let out_len = out.len();
        let node = tape.record_checked(
            nodes,
            out_len,
            Box::new(move |g| {
                vec![g.iter().zip(xs.iter()).map(|(&gv, &xv)| gv * 3.0 * xv).collect()]
            }),
        );
        Ok(Tensor::from_parts(x.shape().to_vec(), out, node))
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        let x = Tensor::from_vec(&[4], vec![0.7, -1.3, 2.0, 0.4]).unwrap();
        let out = check(&[x], |tape, leaves| {
            let bad = bad_square(tape, &leaves[0])?;
            Ok(tape.sum(&bad))
        })
        .unwrap();
        assert!(!out.pass(), "corrupted rule must be reported, got {out:?}");
    }
}
