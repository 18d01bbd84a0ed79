use flowdet::geometry::{Detection, NormalizedBox};
use flowdet::losses::hungarian_match;
use flowdet::metrics::{evaluate, match_detections, EvalConfig};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i64>;

/// Minimum over every injective row→column assignment, by recursion.
fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost[row].len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

#[test]
fn hungarian_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..300 {
        let cols = rng.gen_range(1..=7);
        let rows = rng.gen_range(1..=cols);
        // integer costs make every sum exact, so equality is exact
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(-20..=20) as f64).collect())
            .collect();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.total_cost(&cost), brute_force_min(&cost), "trial {trial}");
        let mut seen = vec![false; cols];
        for &c in &m.assignment {
            assert!(!seen[c]);
            seen[c] = true;
        }
        assert_eq!(m.unmatched.len(), cols - rows);
    }
}

#[test]
fn hungarian_on_real_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen::<f64>() * 10.0 - 3.0).collect())
            .collect();
        let m = hungarian_match(&cost).unwrap();
        assert!((m.total_cost(&cost) - brute_force_min(&cost)).abs() < 1e-9);
    }
}

// ---- metrics ----------------------------------------------------------

/// Box on a 1/64 grid: integer corners `[x1, y1, x2, y2]` in 64ths.
#[derive(Clone, Copy, Debug)]
struct GridBox([i64; 4]);

impl GridBox {
    fn normalized(&self) -> NormalizedBox<f64> {
        let [x1, y1, x2, y2] = self.0.map(|v| v as f64 / 64.0);
        NormalizedBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }
}

fn iou_q(a: &GridBox, b: &GridBox) -> Q {
    let [ax1, ay1, ax2, ay2] = a.0;
    let [bx1, by1, bx2, by2] = b.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    Q::new(inter, union)
}

struct MicroImage {
    gts: Vec<GridBox>,
    /// (box, score numerator in 1/1000)
    preds: Vec<(GridBox, i64)>,
}

fn random_box(rng: &mut ChaCha8Rng) -> GridBox {
    let w = rng.gen_range(4..=32);
    let h = rng.gen_range(4..=32);
    let x = rng.gen_range(0..=64 - w);
    let y = rng.gen_range(0..=64 - h);
    GridBox([x, y, x + w, y + h])
}

fn jitter(b: &GridBox, rng: &mut ChaCha8Rng) -> GridBox {
    let [x1, y1, x2, y2] = b.0;
    let d = |rng: &mut ChaCha8Rng| rng.gen_range(-4i64..=4);
    let nx1 = (x1 + d(rng)).clamp(0, 60);
    let ny1 = (y1 + d(rng)).clamp(0, 60);
    let nx2 = (x2 + d(rng)).clamp(nx1 + 2, 64);
    let ny2 = (y2 + d(rng)).clamp(ny1 + 2, 64);
    GridBox([nx1, ny1, nx2, ny2])
}

fn micro_dataset(rng: &mut ChaCha8Rng) -> Vec<MicroImage> {
    let n_img = rng.gen_range(1..=5);
    let mut scores: Vec<i64> = (1..1000).collect();
    let mut images = Vec::new();
    for _ in 0..n_img {
        let gts: Vec<GridBox> = (0..rng.gen_range(0..=4)).map(|_| random_box(rng)).collect();
        let n_pred = rng.gen_range(0..=4);
        let preds = (0..n_pred)
            .map(|_| {
                let b = if !gts.is_empty() && rng.gen_bool(0.7) {
                    jitter(&gts[rng.gen_range(0..gts.len())], rng)
                } else {
                    random_box(rng)
                };
                // distinct scores
                let s = scores.swap_remove(rng.gen_range(0..scores.len()));
                (b, s)
            })
            .collect();
        images.push(MicroImage { gts, preds });
    }
    images
}

/// Greedy matching in exact arithmetic: returns the number of true positives
/// among predictions with score at least `min_score`.
fn oracle_tp(img: &MicroImage, thr: Q, min_score: i64) -> (usize, usize) {
    let mut kept: Vec<&(GridBox, i64)> = img.preds.iter().filter(|p| p.1 >= min_score).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1));
    let mut taken = vec![false; img.gts.len()];
    let mut tp = 0;
    for (pb, _) in &kept {
        let mut best: Option<(usize, Q)> = None;
        for (gi, g) in img.gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou_q(pb, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= thr {
                taken[gi] = true;
                tp += 1;
            }
        }
    }
    (tp, kept.len())
}

/// All-points interpolated AP by sweeping every distinct score as a cut-off.
fn oracle_ap(images: &[MicroImage], thr: Q, floor: i64) -> Q {
    let scored: Vec<&MicroImage> = images.iter().filter(|i| !i.gts.is_empty()).collect();
    let total_gt: usize = scored.iter().map(|i| i.gts.len()).sum();
    let mut cutoffs: Vec<i64> = scored
        .iter()
        .flat_map(|i| i.preds.iter().map(|p| p.1))
        .filter(|&s| s >= floor)
        .collect();
    cutoffs.sort_unstable_by(|a, b| b.cmp(a));
    let mut pr: Vec<(Q, Q)> = Vec::new();
    for &c in &cutoffs {
        let (tp, n) = scored
            .iter()
            .map(|i| oracle_tp(i, thr, c))
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        pr.push((Q::new(tp as i64, n as i64), Q::new(tp as i64, total_gt as i64)));
    }
    let mut ap = Q::from_integer(0);
    let mut prev_r = Q::from_integer(0);
    for k in 0..pr.len() {
        let p_env = pr[k..].iter().map(|x| x.0).max().unwrap();
        ap += (pr[k].1 - prev_r) * p_env;
        prev_r = pr[k].1;
    }
    ap
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[test]
fn evaluation_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EvalConfig::default();
    let mut checked = 0;
    while checked < 400 {
        let images = micro_dataset(&mut rng);
        if images.iter().all(|i| i.gts.is_empty()) {
            continue;
        }
        checked += 1;
        let preds: Vec<Vec<Detection<f64>>> = images
            .iter()
            .map(|i| {
                i.preds
                    .iter()
                    .map(|(b, s)| Detection {
                        bbox: b.normalized(),
                        score: *s as f64 / 1000.0,
                        class_id: 0,
                    })
                    .collect()
            })
            .collect();
        let gts: Vec<Vec<NormalizedBox<f64>>> = images
            .iter()
            .map(|i| i.gts.iter().map(GridBox::normalized).collect())
            .collect();
        let report = evaluate(&preds, &gts, &cfg).unwrap();
        let total_gt: usize = images.iter().map(|i| i.gts.len()).sum();
        assert_eq!(report.num_gt, total_gt);

        for m in &report.per_iou {
            let thr = Q::new((m.iou_threshold * 10.0).round() as i64, 10);
            let expect = oracle_ap(&images, thr, 0);
            assert!((m.ap - to_f64(expect)).abs() < 1e-12, "AP {} vs {}", m.ap, expect);
            let (tp, n) = images
                .iter()
                .filter(|i| !i.gts.is_empty())
                .map(|i| oracle_tp(i, thr, 0))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            assert_eq!((m.tp, m.fp, m.fn_), (tp, n - tp, total_gt - tp));
        }
        for op in &report.operating_points {
            let thr = Q::new((op.iou_threshold * 10.0).round() as i64, 10);
            let floor = (op.conf_threshold * 1000.0).round() as i64;
            let (tp, n) = images
                .iter()
                .filter(|i| !i.gts.is_empty())
                .map(|i| oracle_tp(i, thr, floor))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            assert_eq!((op.tp, op.fp, op.fn_), (tp, n - tp, total_gt - tp));
            let p = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
            assert_eq!(op.precision, p);
            assert_eq!(op.recall, tp as f64 / total_gt as f64);
            assert!((op.ap - to_f64(oracle_ap(&images, thr, floor))).abs() < 1e-12);
        }
        // AP can only fall as the IoU requirement rises
        for w in report.per_iou.windows(2) {
            assert!(w[1].ap <= w[0].ap + 1e-12);
        }
        let mean = report.per_iou.iter().map(|m| m.ap).sum::<f64>() / report.per_iou.len() as f64;
        assert!((report.ap_10_50 - mean).abs() < 1e-15);
    }
}

#[test]
fn matcher_picks_best_unmatched_ground_truth() {
    // two ground truths; the first prediction overlaps the second one more
    let g = [
        NormalizedBox::new(0.25, 0.5, 0.3, 0.3),
        NormalizedBox::new(0.45, 0.5, 0.3, 0.3),
    ];
    let p = [Detection {
        bbox: NormalizedBox::new(0.43, 0.5, 0.3, 0.3),
        score: 0.9,
        class_id: 0,
    }];
    let m = match_detections(&p, &g, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
}
