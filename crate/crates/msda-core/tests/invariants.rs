//! Property tests for the container layer: layout bijections, pad hygiene,
//! and bit-exact file round trips.

use msda_core::io::{read_tensor, write_tensor};
use msda_core::pyramid::{make_pyramid, padded_offsets, to_channel_last, to_pixel_last, Fill};
use msda_core::tensor::{Dtype, Tensor};
use proptest::prelude::*;

fn dtype_strategy() -> impl Strategy<Value = Dtype> {
    prop_oneof![Just(Dtype::F32), Just(Dtype::F16)]
}

fn level_shapes() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((1usize..=6, 1usize..=6), 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_transforms_are_bijections(
        batch in 1usize..=2,
        heads in 1usize..=3,
        channels in 1usize..=4,
        shapes in level_shapes(),
        dtype in dtype_strategy(),
        padded in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let p = make_pyramid(batch, heads, channels, &shapes, dtype, Fill::RandomSeeded(seed))
            .unwrap();
        let pl = to_pixel_last(&p, padded).unwrap();
        let back = to_channel_last(&pl).unwrap();
        prop_assert_eq!(back.storage(), p.storage());
    }

    #[test]
    fn padded_columns_are_zero(
        heads in 1usize..=2,
        channels in 1usize..=3,
        shapes in level_shapes(),
        seed in any::<u64>(),
    ) {
        let p = make_pyramid(1, heads, channels, &shapes, Dtype::F32, Fill::RandomSeeded(seed))
            .unwrap();
        let pl = to_pixel_last(&p, true).unwrap();
        let data = pl.storage().as_f32();
        let pix = pl.total_padded_pixels();
        let offsets = padded_offsets(pl.levels());
        for bhc in 0..heads * channels {
            for (li, level) in pl.levels().iter().enumerate() {
                for row in 0..level.height {
                    let pad = bhc * pix + offsets[li] + row * (level.width + 1) + level.width;
                    prop_assert_eq!(data[pad], 0.0);
                }
            }
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact(
        dims in prop::collection::vec(1usize..=4, 1..=6),
        dtype in dtype_strategy(),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let mut x = seed | 1;
        let values: Vec<f32> = (0..n)
            .map(|_| {
                x = x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(23);
                // Mix in some negatives and subnormal-ish magnitudes.
                (x as i32 as f32) * 1e-30_f32.max(f32::MIN_POSITIVE)
            })
            .collect();
        let t = Tensor::from_f32_values(dims, dtype, &values).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
