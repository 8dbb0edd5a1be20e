//! Exhaustive reference implementation of COCO-style matching and AP for
//! tiny instances, plus sweeps that compare the library against it. Sweeps
//! panic on the first mismatch.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfmkit_core::BBox;
use sfmkit_data::eval::*;
use sfmkit_data::voc::SizeThresholds;

pub fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::raw(x1, y1, x2, y2)
}

pub fn det(img: &str, bb: BBox, s: f64, class: &str) -> Detection {
    Detection::new(img, bb, s, class).unwrap()
}

pub fn gt(img: &str, bb: BBox, class: &str) -> GroundTruth {
    GroundTruth {
        image_id: img.into(),
        bbox: bb,
        class: class.into(),
    }
}

// ------------------------------------------------------------------ oracle

pub fn oracle_iou(a: &BBox, c: &BBox) -> f64 {
    let iw = (a.x2.min(c.x2) - a.x1.max(c.x1)).max(0.0);
    let ih = (a.y2.min(c.y2) - a.y1.max(c.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (c.x2 - c.x1) * (c.y2 - c.y1) - inter;
    inter / union
}

/// Enumerates every partial one-to-one assignment of detections to ground
/// truth that respects the threshold and returns the one that is best in
/// detection order under the key (matched, not ignored, IoU, lower index).
pub fn oracle_match(dets: &[BBox], gts: &[BBox], ignore: &[bool], thr: f64) -> Vec<Option<usize>> {
    fn key(d: &BBox, g: Option<usize>, gts: &[BBox], ignore: &[bool]) -> (u8, u8, f64, i64) {
        match g {
            None => (0, 0, 0.0, 0),
            Some(g) => (1, u8::from(!ignore[g]), oracle_iou(d, &gts[g]), -(g as i64)),
        }
    }
    fn rec(
        k: usize,
        dets: &[BBox],
        gts: &[BBox],
        ignore: &[bool],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<Vec<Option<usize>>>,
    ) {
        if k == dets.len() {
            let better = match best {
                None => true,
                Some(bv) => {
                    let mut ord = std::cmp::Ordering::Equal;
                    for i in 0..dets.len() {
                        let a = key(&dets[i], cur[i], gts, ignore);
                        let c = key(&dets[i], bv[i], gts, ignore);
                        ord = a.partial_cmp(&c).unwrap();
                        if ord != std::cmp::Ordering::Equal {
                            break;
                        }
                    }
                    ord == std::cmp::Ordering::Greater
                }
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(None);
        rec(k + 1, dets, gts, ignore, thr, used, cur, best);
        cur.pop();
        for g in 0..gts.len() {
            if !used[g] && oracle_iou(&dets[k], &gts[g]) >= thr {
                used[g] = true;
                cur.push(Some(g));
                rec(k + 1, dets, gts, ignore, thr, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    rec(
        0,
        dets,
        gts,
        ignore,
        thr,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.unwrap()
}

/// 101-point AP straight from the definition, recall compared in integers.
pub fn oracle_ap(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut pts = Vec::new();
    let mut c = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        c += usize::from(t);
        pts.push((c, c as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100usize {
        let q = pts
            .iter()
            .filter(|(c, _)| c * 100 >= k * n_gt)
            .map(|p| p.1)
            .fold(0.0f64, f64::max);
        sum += q;
    }
    Some(sum / 101.0)
}

pub fn category(bb: &BBox, t: &SizeThresholds) -> usize {
    let a = (bb.x2 - bb.x1) * (bb.y2 - bb.y1);
    if a <= t.small_max_area {
        1
    } else if a <= t.medium_max_area {
        2
    } else {
        3
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Returns (ap, recall) indexed [range][threshold], range 0 = all, 1..=3 = S/M/L.
pub fn oracle_tables(
    dets: &[Detection],
    gts: &[GroundTruth],
    t: &SizeThresholds,
) -> Vec<Vec<(Option<f64>, Option<f64>)>> {
    let mut images: Vec<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(gts.iter().map(|g| g.image_id.as_str()))
        .collect();
    images.sort();
    images.dedup();
    let mut classes: Vec<&str> = dets
        .iter()
        .map(|d| d.class.as_str())
        .chain(gts.iter().map(|g| g.class.as_str()))
        .collect();
    classes.sort();
    classes.dedup();
    let thrs: Vec<f64> = (0..10)
        .map(|i| 0.5 + 0.05 * i as f64)
        .map(|x| (x * 100.0).round() / 100.0)
        .collect();
    let mut out = Vec::new();
    for range in 0..4 {
        let mut row = Vec::new();
        for &thr in &thrs {
            let mut aps = Vec::new();
            let mut rcs = Vec::new();
            for &c in &classes {
                let mut flat: Vec<(f64, bool)> = Vec::new();
                let mut n_gt = 0;
                for &img in &images {
                    let mut ds: Vec<&Detection> = dets
                        .iter()
                        .filter(|d| d.image_id == img && d.class == c)
                        .collect();
                    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                    ds.truncate(100);
                    let gs: Vec<&GroundTruth> = gts
                        .iter()
                        .filter(|g| g.image_id == img && g.class == c)
                        .collect();
                    let ig: Vec<bool> = gs
                        .iter()
                        .map(|g| range != 0 && category(&g.bbox, t) != range)
                        .collect();
                    n_gt += ig.iter().filter(|i| !**i).count();
                    let db: Vec<BBox> = ds.iter().map(|d| d.bbox).collect();
                    let gb: Vec<BBox> = gs.iter().map(|g| g.bbox).collect();
                    let m = oracle_match(&db, &gb, &ig, thr);
                    for (k, d) in ds.iter().enumerate() {
                        let ignored = match m[k] {
                            Some(g) => ig[g],
                            None => range != 0 && category(&d.bbox, t) != range,
                        };
                        if !ignored {
                            flat.push((d.score, m[k].is_some()));
                        }
                    }
                }
                if n_gt == 0 {
                    continue;
                }
                flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let tp: Vec<bool> = flat.iter().map(|f| f.1).collect();
                aps.push(oracle_ap(&tp, n_gt).unwrap());
                rcs.push(tp.iter().filter(|x| **x).count() as f64 / n_gt as f64);
            }
            row.push((mean(&aps), mean(&rcs)));
        }
        out.push(row);
    }
    out
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_img = rng.random_range(1..=5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let classes = ["chicken", "duck"];
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..6) as f64 * 4.0;
        let y = rng.random_range(0..6) as f64 * 4.0;
        let w = rng.random_range(1..8) as f64 * 4.0;
        let h = rng.random_range(1..8) as f64 * 4.0;
        b(x, y, x + w, y + h)
    };
    for i in 0..n_img {
        let img = format!("im{i}");
        let n_gt = rng.random_range(0..=5);
        for _ in 0..n_gt {
            let c = classes[usize::from(rng.random_bool(0.2))];
            gts.push(gt(&img, rand_box(rng), c));
        }
        let n_det = rng.random_range(0..=5);
        for _ in 0..n_det {
            let c = classes[usize::from(rng.random_bool(0.2))];
            let bb = if !gts.is_empty() && rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-1..=1) as f64 * 2.0;
                let (x1, y1) = (g.bbox.x1 + j(rng), g.bbox.y1 + j(rng));
                b(
                    x1,
                    y1,
                    (g.bbox.x2 + j(rng)).max(x1 + 1.0),
                    (g.bbox.y2 + j(rng)).max(y1 + 1.0),
                )
            } else {
                rand_box(rng)
            };
            let s = rng.random_range(1..=10) as f64 / 10.0;
            dets.push(det(&img, bb, s, c));
        }
    }
    (dets, gts)
}

// ------------------------------------------------------------------ sweeps

/// Greedy matching against exhaustive enumeration on 2000 instances with ≤5 boxes each side.
pub fn sweep_matcher() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let nd = rng.random_range(0..=5);
        let ng = rng.random_range(0..=5);
        let bx = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0..4) as f64 * 2.0;
            let y = rng.random_range(0..4) as f64 * 2.0;
            b(
                x,
                y,
                x + rng.random_range(1..5) as f64 * 2.0,
                y + rng.random_range(1..5) as f64 * 2.0,
            )
        };
        let dets: Vec<BBox> = (0..nd).map(|_| bx(&mut rng)).collect();
        let gts: Vec<BBox> = (0..ng).map(|_| bx(&mut rng)).collect();
        let ignore: Vec<bool> = (0..ng).map(|_| rng.random_bool(0.3)).collect();
        let thr = [0.3, 0.5, 0.75][rng.random_range(0..3)];
        assert_eq!(
            greedy_match(&dets, &gts, &ignore, thr),
            oracle_match(&dets, &gts, &ignore, thr),
            "dets {dets:?} gts {gts:?} ignore {ignore:?} thr {thr}"
        );
    }
}

/// A false positive at 0.9 followed by a true positive at 0.8 against one box: AP = 0.5.
pub fn check_hand_traced() {
    let g = [gt("a", b(0., 0., 10., 10.), "c")];
    let d = [
        det("a", b(50., 50., 60., 60.), 0.9, "c"),
        det("a", b(0., 0., 10., 10.), 0.8, "c"),
    ];
    let m = match_detections(&d, &g, 0.5);
    assert_eq!(m.tp, vec![false, true]);
    assert_eq!(average_precision(&m.tp, 1), Some(0.5));
    let r = coco_map(&d, &g, &SizeThresholds::default());
    assert_eq!(r.ap50, Some(0.5));
    assert_eq!(r.map, Some(0.5));
}

/// Full reports against the oracle on 400 random cases of ≤5 images with ≤5 boxes each.
pub fn sweep_coco_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sizes = SizeThresholds::new(100.0, 400.0).unwrap();
    for case in 0..400 {
        let (dets, gts) = random_case(&mut rng);
        let r = coco_map(&dets, &gts, &sizes);
        let o = oracle_tables(&dets, &gts, &sizes);
        for t in 0..10 {
            assert!(close(r.ap_per_threshold[t], o[0][t].0), "case {case} t {t}");
        }
        let over = |range: usize, which: usize| {
            let v: Vec<f64> = o[range]
                .iter()
                .filter_map(|c| if which == 0 { c.0 } else { c.1 })
                .collect();
            mean(&v)
        };
        assert!(close(r.map, over(0, 0)), "case {case}");
        assert!(close(r.ap50, o[0][0].0));
        assert!(close(r.ap75, o[0][5].0));
        assert!(
            close(r.ap_s, over(1, 0)),
            "case {case}: {:?} {:?}",
            r.ap_s,
            over(1, 0)
        );
        assert!(close(r.ap_m, over(2, 0)), "case {case}");
        assert!(close(r.ar_s, over(1, 1)), "case {case}");
        assert!(close(r.ar_m, over(2, 1)), "case {case}");
        assert!(close(r.ar, over(0, 1)), "case {case}");
    }
}
