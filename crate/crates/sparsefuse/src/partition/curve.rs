//! Space-filling curve encodings over non-negative 3D grid indices.

use crate::error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Bits per axis; three axes fit a 63-bit interleave.
pub const CURVE_BITS: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Curve {
    #[default]
    Morton,
    Hilbert,
}

/// Spread the low 21 bits of `x` so bit i lands at position 3i.
fn spread_bits(x: u64) -> u64 {
    let mut x = x & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

fn check_range(axis: char, v: u64) -> Result<u64> {
    if v >= 1 << CURVE_BITS {
        Err(Error::IndexOverflow { axis, index: v, bits: CURVE_BITS })
    } else {
        Ok(v)
    }
}

/// Z-order code: bit i of x, y, z lands at 3i, 3i+1, 3i+2.
pub fn morton_encode(ix: u64, iy: u64, iz: u64) -> Result<u64> {
    Ok(spread_bits(check_range('x', ix)?)
        | spread_bits(check_range('y', iy)?) << 1
        | spread_bits(check_range('z', iz)?) << 2)
}

/// 3D Hilbert index at 21 bits per axis (Skilling's transpose construction).
pub fn hilbert_encode(ix: u64, iy: u64, iz: u64) -> Result<u64> {
    check_range('x', ix)?;
    check_range('y', iy)?;
    check_range('z', iz)?;
    Ok(hilbert_encode_bits([ix as u32, iy as u32, iz as u32], CURVE_BITS))
}

fn hilbert_encode_bits(mut x: [u32; 3], bits: u32) -> u64 {
    // Axes → transpose form.
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    x[1] ^= x[0];
    x[2] ^= x[1];
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in &mut x {
        *xi ^= t;
    }
    // Interleave the transpose: axis 0 carries the most significant bit
    // of each 3-bit level.
    spread_bits(x[2] as u64) | spread_bits(x[1] as u64) << 1 | spread_bits(x[0] as u64) << 2
}

pub fn encode(curve: Curve, ix: u64, iy: u64, iz: u64) -> Result<u64> {
    match curve {
        Curve::Morton => morton_encode(ix, iy, iz),
        Curve::Hilbert => hilbert_encode(ix, iy, iz),
    }
}
