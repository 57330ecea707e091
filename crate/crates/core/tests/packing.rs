use flute_core::lut_dequant::{
    make_vectorized_lut, scalar_dequantize, simulate_warp_lookup, vec_dequantize,
    worst_case_degree, VectorizedTable, SUPPORTED_DUPS, WARP_SIZE,
};
use flute_core::nfquant::{build_nf_table, quantize_matrix};
use flute_core::numerics::f32_to_f16;
use flute_core::restructure::{pack_indices, slice_widths, words_for, LayoutDescriptor};
use flute_core::{Matrix, QuantConfig};
use proptest::prelude::*;

fn layout_strategy() -> impl Strategy<Value = LayoutDescriptor> {
    (
        prop::sample::select(vec![8usize, 16, 32]),
        prop::sample::select(vec![4usize, 8, 16]),
        1usize..=2,
        1usize..=2,
    )
        .prop_map(|(fk, fnn, mk, mn)| {
            LayoutDescriptor::new(16, fnn * mn, fk * mk, 16, fnn, fk).unwrap()
        })
}

#[test]
fn fragments_reassemble_the_permuted_matrix() {
    let (k, n, bits) = (128, 64, 3);
    let layout = LayoutDescriptor::new(16, 32, 64, 16, 8, 16).unwrap();
    let idx: Vec<u8> = (0..k * n).map(|e| (e * 5 % 8) as u8).collect();
    let p = pack_indices(&idx, k, n, bits, layout).unwrap();
    let mut flat = Vec::new();
    for t in 0..p.num_tiles() {
        for f in 0..layout.frags_per_tile() {
            flat.extend(p.unpack_fragment(t, f).unwrap());
        }
    }
    for (pos, &v) in flat.iter().enumerate() {
        let (i, j) = layout.coordinate_of(k, pos);
        assert_eq!(v, idx[i * n + j], "position {pos}");
    }
}

#[test]
fn slice_storage_matches_bit_budget() {
    let (k, n) = (256, 64);
    for bits in [2u8, 3, 4] {
        let p = pack_indices(&vec![0; k * n], k, n, bits, LayoutDescriptor::default()).unwrap();
        let widths = slice_widths(bits).unwrap();
        assert_eq!(widths.iter().map(|&w| w as u32).sum::<u32>(), bits as u32);
        let words: usize = widths.iter().map(|&w| words_for(k * n, w)).sum();
        assert_eq!(p.byte_len(), words * 4);
        assert_eq!(p.byte_len() * 8, k * n * bits as usize);
    }
}

#[test]
fn vectorized_matrix_dequant_equals_scalar_path() {
    let w = Matrix::from_fn(128, 32, |i, j| ((i * 7 + j * 3) % 29) as f32 / 7.0 - 2.0);
    for bits in [3u8, 4] {
        let q = quantize_matrix(&w, QuantConfig::new(bits, 64).unwrap()).unwrap();
        let half_table = q.table().to_half();
        for dup in SUPPORTED_DUPS {
            let vt = make_vectorized_lut(q.table(), dup).unwrap();
            for i in (0..128).step_by(2) {
                for j in 0..32 {
                    let (a, b) = (q.index(i, j), q.index(i + 1, j));
                    let s = q.scale_at(i, j);
                    assert_eq!(q.scale_at(i + 1, j), s);
                    let got = vec_dequantize(vt.pack_pair(a, b), s, &vt);
                    assert_eq!(
                        got,
                        (
                            scalar_dequantize(a, s, &half_table),
                            scalar_dequantize(b, s, &half_table)
                        )
                    );
                }
            }
        }
    }
}

#[test]
fn first_components_project_back_to_table() {
    for bits in [2u8, 3, 4] {
        let t = build_nf_table::<f32>(bits).unwrap();
        let vt = make_vectorized_lut(&t, 4).unwrap();
        for (i, &h) in t.to_half().iter().enumerate() {
            for c in 0..4 {
                assert_eq!(vt.entry(i << bits, c).0, h);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_identity(
        layout in layout_strategy(),
        bits in prop::sample::select(vec![2u8, 3, 4]),
        tk in 1usize..4,
        tn in 1usize..4,
        seed in any::<u64>(),
    ) {
        let (k, n) = (layout.tile_k * tk, layout.tile_n * tn);
        let mut state = seed | 1;
        let idx: Vec<u8> = (0..k * n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % (1 << bits)) as u8
            })
            .collect();
        let p = pack_indices(&idx, k, n, bits, layout).unwrap();
        prop_assert_eq!(p.unpack_all(), idx);
        for pos in (0..k * n).step_by(37) {
            let (i, j) = layout.coordinate_of(k, pos);
            prop_assert_eq!(layout.packed_position(k, i, j), pos);
        }
    }

    #[test]
    fn warp_degree_never_exceeds_analytic_bound(
        bits in prop::sample::select(vec![3u8, 4]),
        dup in prop::sample::select(SUPPORTED_DUPS.to_vec()),
        lanes in prop::collection::vec(any::<u32>(), WARP_SIZE),
    ) {
        let t = build_nf_table::<f32>(bits).unwrap().to_half();
        let vt = VectorizedTable::from_half(&t, dup).unwrap();
        let mut warp = [0u32; WARP_SIZE];
        for (w, l) in warp.iter_mut().zip(&lanes) {
            *w = l % (1 << (2 * bits));
        }
        let r = simulate_warp_lookup(&warp, &vt);
        prop_assert!(r.conflict_degree >= 1 && r.conflict_degree <= worst_case_degree(bits, dup));
    }

    #[test]
    fn zero_index_dequantizes_to_zero(bits in prop::sample::select(vec![3u8, 4]), s in 0.0f32..1000.0) {
        let t = build_nf_table::<f32>(bits).unwrap();
        let z = t.zero_index();
        let vt = make_vectorized_lut(&t, 1).unwrap();
        let (a, b) = vec_dequantize(vt.pack_pair(z, z), f32_to_f16(s), &vt);
        prop_assert_eq!(a.to_f32(), 0.0);
        prop_assert_eq!(b.to_f32(), 0.0);
    }
}
