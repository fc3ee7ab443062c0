//! 3D Morton (Z-order) codes with 21 bits per axis.

use crate::error::{LestError, Result};

/// Exclusive upper bound on a coordinate that fits the 63-bit code.
pub const MORTON_AXIS_LIMIT: u32 = 1 << 21;

#[inline]
fn spread_by_3(a: u32) -> u64 {
    let mut x = u64::from(a) & 0x1f_ffff;
    x = (x | x << 32) & 0x1f_0000_0000_ffff;
    x = (x | x << 16) & 0x1f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves coordinate bits: bit `b` of x, y, z lands at `3b`, `3b+1`,
/// `3b+2`.
pub fn morton3(ix: u32, iy: u32, iz: u32) -> Result<u64> {
    if ix >= MORTON_AXIS_LIMIT || iy >= MORTON_AXIS_LIMIT || iz >= MORTON_AXIS_LIMIT {
        return Err(LestError::contract(format!(
            "morton coordinate ({ix}, {iy}, {iz}) exceeds 21 bits"
        )));
    }
    Ok(morton3_unchecked(ix, iy, iz))
}

#[inline]
pub(crate) fn morton3_unchecked(ix: u32, iy: u32, iz: u32) -> u64 {
    spread_by_3(ix) | spread_by_3(iy) << 1 | spread_by_3(iz) << 2
}
