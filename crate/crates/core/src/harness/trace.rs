//! Binary noise-trace files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "GUMT"
//! 4       4           version (u32, currently 1)
//! 8       4           vocab_size (u32)
//! 12      4           num_steps (u32)
//! 16      4           flags (u32)
//! 20      32          model fingerprint
//! 52      4*T         reference token ids (u32)
//! ...     8*T*V       noise, row-major IEEE-754 binary64
//! ```
//!
//! Flag bit 0 marks a provenance trailer after the noise block: the global
//! seed (u64), the record id length (u32), and the record id as UTF-8.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hindsight::{NoiseTrace, TraceProvenance};
use crate::model::ModelFingerprint;

pub const MAGIC: &[u8; 4] = b"GUMT";
pub const VERSION: u32 = 1;
pub const FLAG_PROVENANCE: u32 = 1;
const HEADER_LEN: usize = 52;

pub fn encode_trace(trace: &NoiseTrace) -> Result<Vec<u8>> {
    let steps = trace.num_steps();
    if trace.noise.len() != steps * trace.vocab_size {
        return Err(Error::Input(format!(
            "trace holds {} noise values, expected {} x {}",
            trace.noise.len(),
            steps,
            trace.vocab_size
        )));
    }
    let to_u32 = |x: usize, what: &str| {
        u32::try_from(x).map_err(|_| Error::Input(format!("{what} {x} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * steps + 8 * trace.noise.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(trace.vocab_size, "vocab size")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(steps, "step count")?.to_le_bytes());
    let flags = if trace.provenance.is_some() { FLAG_PROVENANCE } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&trace.model_fingerprint.0);
    for &t in &trace.reference {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for &g in &trace.noise {
        buf.extend_from_slice(&g.to_le_bytes());
    }
    if let Some(p) = &trace.provenance {
        buf.extend_from_slice(&p.global_seed.to_le_bytes());
        buf.extend_from_slice(&to_u32(p.record_id.len(), "record id length")?.to_le_bytes());
        buf.extend_from_slice(p.record_id.as_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!(
                    "file truncated while reading {what}: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_trace(buf: &[u8]) -> Result<NoiseTrace> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(fail(0, format!("bad magic {magic:02x?}, expected \"GUMT\"")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(fail(
            4,
            format!("unsupported trace version {version} (this build reads version {VERSION})"),
        ));
    }
    let vocab_size = c.u32("vocab size")? as usize;
    let steps = c.u32("step count")? as usize;
    let flags = c.u32("flags")?;
    if flags & !FLAG_PROVENANCE != 0 {
        return Err(fail(16, format!("unknown flag bits {flags:#x}")));
    }
    let fingerprint = ModelFingerprint(c.take(32, "fingerprint")?.try_into().unwrap());
    let ref_start = c.pos;
    let mut reference = Vec::with_capacity(steps);
    for _ in 0..steps {
        reference.push(c.u32("reference tokens")?);
    }
    if let Some(i) = reference.iter().position(|&t| t as usize >= vocab_size) {
        return Err(fail(
            ref_start + 4 * i,
            format!("reference token {} out of range for vocabulary of size {vocab_size}", reference[i]),
        ));
    }
    let count = steps
        .checked_mul(vocab_size)
        .ok_or_else(|| fail(8, "vocab_size x num_steps overflows".into()))?;
    let bytes = count
        .checked_mul(8)
        .ok_or_else(|| fail(8, "noise block size overflows".into()))?;
    let raw = c.take(bytes, "noise values")?;
    let noise = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let provenance = if flags & FLAG_PROVENANCE != 0 {
        let global_seed = c.u64("provenance seed")?;
        let len = c.u32("provenance id length")? as usize;
        let at = c.pos;
        let id = c.take(len, "provenance id")?;
        let record_id = std::str::from_utf8(id)
            .map_err(|e| fail(at, format!("record id is not UTF-8: {e}")))?
            .to_string();
        Some(TraceProvenance {
            global_seed,
            record_id,
        })
    } else {
        None
    };
    if c.pos != buf.len() {
        return Err(fail(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(NoiseTrace {
        vocab_size,
        reference,
        noise,
        model_fingerprint: fingerprint,
        provenance,
    })
}

pub fn write_trace(trace: &NoiseTrace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_trace(trace)?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<NoiseTrace> {
    decode_trace(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(provenance: bool) -> NoiseTrace {
        NoiseTrace {
            vocab_size: 3,
            reference: vec![2, 0, 1],
            noise: vec![0.5, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 0.1, 7.0, -1e-300, 2.0],
            model_fingerprint: ModelFingerprint([0xab; 32]),
            provenance: provenance.then(|| TraceProvenance {
                global_seed: 42,
                record_id: "rec-\u{e9}".into(),
            }),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_trace(&sample(false)).unwrap();
        assert_eq!(&bytes[..4], b"GUMT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
        assert_eq!(&bytes[20..52], &[0xab; 32]);
        assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 52 + 12 + 72);
        assert_eq!(f64::from_le_bytes(bytes[64..72].try_into().unwrap()), 0.5);
    }

    #[test]
    fn round_trip_is_bitwise() {
        for prov in [false, true] {
            let t = sample(prov);
            let back = decode_trace(&encode_trace(&t).unwrap()).unwrap();
            assert!(back.bitwise_eq(&t));
        }
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = encode_trace(&sample(false)).unwrap();
        bytes[0] = b'X';
        match decode_trace(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = encode_trace(&sample(false)).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        match decode_trace(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("version 2"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_trace(&sample(true)).unwrap();
        for cut in [3, 30, 60, 100, bytes.len() - 1] {
            match decode_trace(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_trace(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_reference_rejected() {
        let mut bytes = encode_trace(&sample(false)).unwrap();
        bytes[56..60].copy_from_slice(&9u32.to_le_bytes());
        match decode_trace(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 56),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn arbitrary_traces_round_trip(
            v in 1usize..6,
            rows in proptest::collection::vec(proptest::collection::vec(any::<u64>(), 6), 0..5),
            seed in any::<u64>(),
        ) {
            let noise: Vec<f64> = rows.iter().flat_map(|r| r[..v].iter().map(|&b| f64::from_bits(b))).collect();
            let t = NoiseTrace {
                vocab_size: v,
                reference: (0..rows.len() as u32).map(|i| i % v as u32).collect(),
                noise,
                model_fingerprint: ModelFingerprint([seed as u8; 32]),
                provenance: Some(TraceProvenance { global_seed: seed, record_id: format!("{seed}") }),
            };
            let back = decode_trace(&encode_trace(&t).unwrap()).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
