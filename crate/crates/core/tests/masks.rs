use proptest::prelude::*;
use q4dg::grid::{build_spatial_mask, build_temporal_mask, AttentionMask, CameraSetting, GridLayout};

const SETTINGS: [CameraSetting; 3] = [
    CameraSetting::MonoStatic,
    CameraSetting::MonoDynamic,
    CameraSetting::MultiStatic,
];

/// Cell of flat token `i`, computed from the storage order (view-major,
/// then time, then patch) without going through the layout helpers.
fn cell(i: usize, times: usize, patches: usize) -> (usize, usize, usize) {
    let p = i % patches;
    let frame = i / patches;
    (frame / times, frame % times, p)
}

fn brute_spatial(v: usize, t: usize, p: usize) -> Vec<bool> {
    let n = v * t * p;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(cell(i, t, p).1 == cell(j, t, p).1);
        }
    }
    out
}

fn brute_temporal(v: usize, t: usize, p: usize, s: usize) -> Vec<bool> {
    let n = v * t * p;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (va, ta, pa) = cell(i, t, p);
        for j in 0..n {
            let (vb, tb, pb) = cell(j, t, p);
            let dt = (ta as i64 - tb as i64).unsigned_abs() as usize;
            out.push(va == vb && pa == pb && 2 * dt < s);
        }
    }
    out
}

fn layout(v: usize, t: usize, p: usize, setting: CameraSetting) -> Option<GridLayout> {
    // P = 4 as a 2×2 patch grid to exercise the two-dimensional arrangement.
    let (rows, cols) = if p == 4 { (2, 2) } else { (1, p) };
    GridLayout::new(v, t, rows, cols, setting).ok()
}

#[test]
fn builders_match_brute_force_predicates() {
    let mut checked = 0;
    for setting in SETTINGS {
        for v in 1..=6 {
            for t in 1..=6 {
                for p in [1, 4] {
                    let Some(l) = layout(v, t, p, setting) else {
                        assert!(setting != CameraSetting::MultiStatic && v > 1);
                        continue;
                    };
                    assert_eq!(*build_spatial_mask(l).bits, brute_spatial(v, t, p));
                    for s in [1, 3, 5] {
                        let m = build_temporal_mask(l, s).unwrap();
                        assert_eq!(*m.bits, brute_temporal(v, t, p, s), "V={v} T={t} P={p} S={s}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert_eq!(checked, (6 * 6 * 2 + 2 * 6 * 2) * 3);
}

#[test]
fn mono_settings_give_structurally_equal_masks() {
    let a = GridLayout::flat(1, 5, 4, CameraSetting::MonoStatic).unwrap();
    let b = GridLayout::flat(1, 5, 4, CameraSetting::MonoDynamic).unwrap();
    assert_eq!(build_spatial_mask(a).bits, build_spatial_mask(b).bits);
    assert_eq!(
        build_temporal_mask(a, 3).unwrap().bits,
        build_temporal_mask(b, 3).unwrap().bits
    );
}

#[test]
fn dump_text_golden() {
    let l = GridLayout::flat(1, 4, 1, CameraSetting::MonoDynamic).unwrap();
    let text = build_temporal_mask(l, 3).unwrap().to_text(3);
    assert_eq!(text, "1 4 1 3 mono-d temporal\n1100\n1110\n0111\n0011\n");
    let l = GridLayout::flat(2, 2, 1, CameraSetting::MultiStatic).unwrap();
    let text = build_spatial_mask(l).to_text(1);
    assert_eq!(text, "2 2 1 1 multi-s spatial\n1010\n0101\n1010\n0101\n");
}

fn transpose_equal(m: &AttentionMask) -> bool {
    let n = m.n();
    (0..n).all(|i| (0..n).all(|j| m.get(i, j) == m.get(j, i)))
}

proptest! {
    #[test]
    fn masks_are_symmetric_with_true_diagonal(
        v in 1usize..5, t in 1usize..7, rows in 1usize..3, cols in 1usize..3, half in 0usize..4
    ) {
        let l = GridLayout::new(v, t, rows, cols, CameraSetting::MultiStatic).unwrap();
        let s = 2 * half + 1;
        let sp = build_spatial_mask(l);
        let tm = build_temporal_mask(l, s).unwrap();
        for m in [&sp, &tm] {
            prop_assert!(transpose_equal(m));
            prop_assert!((0..m.n()).all(|i| m.get(i, i)));
        }
        // The two masks overlap only on the diagonal.
        for i in 0..l.tokens() {
            for j in 0..l.tokens() {
                prop_assert_eq!(sp.get(i, j) && tm.get(i, j), i == j);
            }
        }
        // Spatial masks are T blocks of (V·P)² ones.
        prop_assert_eq!(sp.count_ones(), t * (v * rows * cols).pow(2));
    }

    #[test]
    fn mask_construction_is_pure(v in 1usize..4, t in 1usize..5, s in prop::sample::select(vec![1usize, 3, 5])) {
        let l = GridLayout::flat(v, t, 2, CameraSetting::MultiStatic).unwrap();
        prop_assert_eq!(build_temporal_mask(l, s).unwrap().bits, build_temporal_mask(l, s).unwrap().bits);
    }
}
