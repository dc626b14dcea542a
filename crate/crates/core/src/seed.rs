/// Independent sub-seed for `stream`, via one SplitMix64 round over the pair.
pub(crate) fn derive(base: u64, stream: u64) -> u64 {
    let mut x = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
