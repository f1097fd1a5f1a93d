//! Binary particle snapshots taken at period boundaries.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DYNPSNAP" | format version u32 | payload length u64 | payload | SHA-256(payload)
//! ```
//!
//! The payload holds the configuration fingerprint, the period, the array
//! dimensions, the optional label reference, every instance pool and the
//! per-instance diagnostics. Floats are stored by bit pattern, so a
//! round-trip is exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::CoefficientArray;
use crate::smc::{InstanceDiagnostics, Particle, ParticlePool, PeriodState};

const MAGIC: &[u8; 8] = b"DYNPSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

/// A period state plus the fingerprint of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub fingerprint: String,
    pub state: PeriodState,
}

impl Snapshot {
    pub fn new(fingerprint: impl Into<String>, state: PeriodState) -> Self {
        Self { fingerprint: fingerprint.into(), state }
    }

    /// Refuses to continue a run under a different configuration.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::SnapshotIntegrity(format!(
                "snapshot was written under configuration {} but the current one is {}",
                self.fingerprint, expected
            )))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(self.fingerprint.as_bytes());
        let st = &self.state;
        w.u32(st.period);
        let dims = st
            .pools
            .iter()
            .find_map(|p| p.particles.first())
            .map(|p| p.coefficients.dims())
            .or_else(|| st.reference.as_ref().map(CoefficientArray::dims))
            .unwrap_or((0, 0, 0));
        for d in [dims.0, dims.1, dims.2] {
            w.len(d);
        }
        match &st.reference {
            Some(r) => {
                check_dims(r, dims)?;
                w.u8(1);
                w.floats(r.values());
            }
            None => w.u8(0),
        }
        w.len(st.pools.len());
        for pool in &st.pools {
            w.u32(pool.instance_id);
            w.u32(pool.period);
            w.u64(pool.rng_seed);
            w.len(pool.particles.len());
            let n = pool.particles.first().map_or(0, |p| p.memberships.len());
            w.len(n);
            for part in &pool.particles {
                check_dims(&part.coefficients, dims)?;
                if part.memberships.len() != n {
                    return Err(Error::Contract("particles of one pool hold different membership counts".into()));
                }
                w.f64(part.log_weight);
                w.floats(part.coefficients.values());
                for &s in &part.memberships {
                    w.buf.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        w.len(st.diagnostics.len());
        for d in &st.diagnostics {
            w.u32(d.period);
            w.u32(d.instance_id);
            w.u64(d.seed);
            w.len(d.observations);
            w.f64(d.min_ess);
            w.len(d.resamples);
            w.len(d.proposals);
            w.len(d.acceptances);
            w.f64(d.month_end_ess);
            w.len(d.prior_fallbacks);
        }
        let payload = w.buf;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::SnapshotIntegrity("not a snapshot file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(Error::SnapshotVersion { found: version, expected: SNAPSHOT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let expected_total = (HEADER_LEN as u64).checked_add(len).and_then(|v| v.checked_add(DIGEST_LEN as u64));
        if expected_total != Some(bytes.len() as u64) {
            return Err(Error::SnapshotIntegrity(format!(
                "file holds {} bytes but the header announces a {len}-byte payload",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
        if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len as usize..] {
            return Err(Error::SnapshotIntegrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let fingerprint = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("fingerprint is not UTF-8"))?;
        let period = r.u32()?;
        let dims = (r.len()?, r.len()?, r.len()?);
        let size = dims.0.checked_mul(dims.1).and_then(|v| v.checked_mul(dims.2)).ok_or_else(|| corrupt("dimensions overflow"))?;
        let array = |r: &mut Reader| -> Result<CoefficientArray> {
            CoefficientArray::from_values(dims.0, dims.1, dims.2, r.floats(size)?).map_err(|e| corrupt(&e.to_string()))
        };
        let reference = match r.u8()? {
            0 => None,
            1 => Some(array(&mut r)?),
            _ => return Err(corrupt("bad reference flag")),
        };
        let pool_count = r.len()?;
        let mut pools = Vec::with_capacity(pool_count.min(1 << 16));
        for _ in 0..pool_count {
            let instance_id = r.u32()?;
            let pool_period = r.u32()?;
            let rng_seed = r.u64()?;
            let j = r.len()?;
            let n = r.len()?;
            let mut particles = Vec::with_capacity(j.min(1 << 20));
            for _ in 0..j {
                let log_weight = r.f64()?;
                let coefficients = array(&mut r)?;
                let raw = r.take(n.checked_mul(2).ok_or_else(|| corrupt("membership count overflows"))?)?;
                let memberships = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
                particles.push(Particle { coefficients, memberships, log_weight });
            }
            pools.push(ParticlePool::new(particles, pool_period, rng_seed, instance_id));
        }
        let diag_count = r.len()?;
        let mut diagnostics = Vec::with_capacity(diag_count.min(1 << 16));
        for _ in 0..diag_count {
            diagnostics.push(InstanceDiagnostics {
                period: r.u32()?,
                instance_id: r.u32()?,
                seed: r.u64()?,
                observations: r.len()?,
                min_ess: r.f64()?,
                resamples: r.len()?,
                proposals: r.len()?,
                acceptances: r.len()?,
                month_end_ess: r.f64()?,
                prior_fallbacks: r.len()?,
            });
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes after the last record"));
        }
        Ok(Self { fingerprint, state: PeriodState { period, pools, reference, diagnostics } })
    }
}

fn check_dims(b: &CoefficientArray, dims: (usize, usize, usize)) -> Result<()> {
    if b.dims() == dims {
        Ok(())
    } else {
        Err(Error::Contract(format!("coefficient array {:?} in a snapshot of {dims:?} arrays", b.dims())))
    }
}

fn corrupt(msg: &str) -> Error {
    Error::SnapshotIntegrity(format!("malformed payload: {msg}"))
}

/// Writes to a temporary sibling and renames, so readers never see a partial
/// file.
pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<()> {
    let bytes = snapshot.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    Snapshot::from_bytes(&std::fs::read(path)?)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn floats(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.len(v.len());
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("record runs past the end"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("array length overflows"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))).collect())
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(instances: usize, j: usize, n: usize, seed: u64) -> PeriodState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, q, p) = (3, 2, 2);
        let pools = (0..instances)
            .map(|m| {
                let particles = (0..j)
                    .map(|_| Particle {
                        coefficients: CoefficientArray::from_values(k, q, p, (0..k * q * p).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap(),
                        memberships: (0..n).map(|_| rng.random_range(0..k as u16)).collect(),
                        log_weight: -rng.random::<f64>(),
                    })
                    .collect();
                ParticlePool::new(particles, 4, rng.random(), m as u32)
            })
            .collect();
        let diagnostics = (0..instances)
            .map(|m| InstanceDiagnostics { period: 4, instance_id: m as u32, seed: 9, observations: n, min_ess: 1.5, month_end_ess: f64::MIN_POSITIVE, ..Default::default() })
            .collect();
        PeriodState { period: 4, pools, reference: Some(CoefficientArray::zeros(k, q, p)), diagnostics }
    }

    #[test]
    fn round_trip_is_exact() {
        for (instances, j, n) in [(2, 5, 7), (1, 3, 0), (20, 150, 2)] {
            let snap = Snapshot::new("abc123", state(instances, j, n, 3));
            let bytes = snap.to_bytes().unwrap();
            let back = Snapshot::from_bytes(&bytes).unwrap();
            assert_eq!(back, snap);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip_with_empty_memberships() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let snap = Snapshot::new("f", state(3, 4, 0, 5));
        write_snapshot(&path, &snap).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), snap);
    }

    #[test]
    fn truncation_and_corruption_are_refused() {
        let bytes = Snapshot::new("f", state(2, 4, 3, 1)).to_bytes().unwrap();
        for cut in [0, 5, HEADER_LEN, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Snapshot::from_bytes(&bytes[..cut]), Err(Error::SnapshotIntegrity(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 40] ^= 1;
        assert!(matches!(Snapshot::from_bytes(&flipped), Err(Error::SnapshotIntegrity(_))));
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let mut bytes = Snapshot::new("f", state(1, 2, 1, 1)).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Snapshot::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::SnapshotVersion { found: 7, expected: SNAPSHOT_VERSION }));
        assert!(err.to_string().contains('7') && err.to_string().contains(&SNAPSHOT_VERSION.to_string()));
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let snap = Snapshot::new("aaa", state(1, 2, 1, 1));
        assert!(snap.check_fingerprint("aaa").is_ok());
        assert!(snap.check_fingerprint("bbb").is_err());
    }
}
