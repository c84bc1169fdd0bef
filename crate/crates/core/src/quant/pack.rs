//! Packed block layout (all integers little-endian):
//!
//! ```text
//! u32 name_len | name bytes | u32 ndim | u32 dims[ndim] | u8 bits | u8 group_axis
//! u32 group_size | u32 group_count | f32 scales[group_count] | i16 zeros[group_count]
//! codes packed LSB-first, ceil(numel * bits / 8) bytes
//! ```

use super::{GroupAxis, QuantError, QuantParams, QuantizedLinear};

/// Packs `bits`-wide codes into a little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let mut bit = i * bits;
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let bits = bits as usize;
    (0..n)
        .map(|i| {
            let mut c = 0u8;
            for b in 0..bits {
                let bit = i * bits + b;
                if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                    c |= 1 << b;
                }
            }
            c
        })
        .collect()
}

pub(super) fn write_block(q: &QuantizedLinear, name: &str, out: &mut Vec<u8>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend(2u32.to_le_bytes());
    out.extend((q.d_out as u32).to_le_bytes());
    out.extend((q.d_in as u32).to_le_bytes());
    out.push(q.bits);
    out.push(match q.axis {
        GroupAxis::Input => 0,
        GroupAxis::Output => 1,
    });
    out.extend((q.group_size as u32).to_le_bytes());
    out.extend((q.params.len() as u32).to_le_bytes());
    for p in &q.params {
        out.extend(p.h.to_le_bytes());
    }
    for p in &q.params {
        out.extend(p.z.to_le_bytes());
    }
    out.extend(pack_codes(&q.codes, q.bits));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QuantError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| QuantError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, QuantError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, QuantError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(super) fn read_block(bytes: &[u8]) -> Result<(String, QuantizedLinear, usize), QuantError> {
    let mut r = Reader { bytes, pos: 0 };
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| QuantError::Format("name is not UTF-8".into()))?
        .to_string();
    let ndim = r.u32()?;
    if ndim != 2 {
        return Err(QuantError::Format(format!("expected 2 dims, found {ndim}")));
    }
    let d_out = r.u32()? as usize;
    let d_in = r.u32()? as usize;
    let bits = r.u8()?;
    let axis = match r.u8()? {
        0 => GroupAxis::Input,
        1 => GroupAxis::Output,
        a => return Err(QuantError::Format(format!("unknown group axis {a}"))),
    };
    let group_size = r.u32()? as usize;
    let group_count = r.u32()? as usize;
    if !(1..=8).contains(&bits) || group_size == 0 {
        return Err(QuantError::Format(format!("bad bits {bits} or group size {group_size}")));
    }
    let scales = r.take(group_count.checked_mul(4).ok_or_else(overflow)?)?;
    let zeros = r.take(group_count * 2)?;
    let params = scales
        .chunks_exact(4)
        .zip(zeros.chunks_exact(2))
        .map(|(h, z)| QuantParams {
            h: f32::from_le_bytes(h.try_into().unwrap()),
            z: i16::from_le_bytes(z.try_into().unwrap()),
        })
        .collect();
    let n = d_out.checked_mul(d_in).ok_or_else(overflow)?;
    let packed = r.take((n * bits as usize).div_ceil(8))?;
    let codes = unpack_codes(packed, bits, n);
    let q = QuantizedLinear::from_parts((d_out, d_in), bits, group_size, axis, params, codes)?;
    Ok((name, q, r.pos))
}

fn overflow() -> QuantError {
    QuantError::Format("size overflow".into())
}
