//! `.cotp` container: fixed little-endian header plus two range-coded
//! payloads (coordinates, then features).

use crate::codec::factorized::{FactorizedModel, LIKELIHOOD_FLOOR};
use crate::codec::range::{RangeDecoder, RangeEncoder, PROB_TOTAL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"COTP";
pub const VERSION: u8 = 1;
/// Largest alphabet (escape excluded) any channel table may hold.
pub const MAX_ALPHABET: i64 = 4096;
/// CDF tail mass left to the escape symbol on each side.
const TAIL: f64 = 1.0 / (1u64 << 20) as f64;

/// Integer-frequency coding table for one channel: symbols `lo..=hi` plus
/// a trailing escape that is followed by the raw 32-bit value.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolTable {
    pub lo: i64,
    pub freqs: Vec<u32>,
    pub cum: Vec<u32>,
}

impl SymbolTable {
    /// Builds a table from bin masses over `lo..lo+masses.len()`. Masses are
    /// floored, the remainder goes to the escape symbol, and everything is
    /// renormalised to `PROB_TOTAL` with every frequency at least 1.
    pub fn from_masses(lo: i64, masses: &[f64]) -> Self {
        let inside: f64 = masses.iter().map(|p| p.max(LIKELIHOOD_FLOOR)).sum();
        let esc = (1.0 - masses.iter().sum::<f64>()).max(LIKELIHOOD_FLOOR);
        let norm = inside + esc;
        let mut freqs: Vec<u32> = masses
            .iter()
            .map(|p| p.max(LIKELIHOOD_FLOOR))
            .chain(std::iter::once(esc))
            .map(|p| ((p / norm * f64::from(PROB_TOTAL)).round() as u32).max(1))
            .collect();
        rebalance(&mut freqs);
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0);
        for f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        SymbolTable { lo, freqs, cum }
    }

    pub fn from_model(model: &FactorizedModel, params: &Tensor, channel: usize) -> Self {
        let a = model.quantile(params, channel, TAIL).round() as i64;
        let b = model.quantile(params, channel, 1.0 - TAIL).round() as i64;
        let (mut lo, mut hi) = (a.min(b), a.max(b));
        if hi - lo + 1 > MAX_ALPHABET {
            let mid = model.quantile(params, channel, 0.5).round() as i64;
            lo = mid - MAX_ALPHABET / 2;
            hi = lo + MAX_ALPHABET - 1;
        }
        let masses: Vec<f64> = (lo..=hi).map(|q| model.bin_mass(params, channel, q)).collect();
        Self::from_masses(lo, &masses)
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.freqs.len() as i64 - 2
    }

    fn escape(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Bits the coder spends on `q` under this table.
    pub fn cost(&self, q: i64) -> f64 {
        let total = f64::from(PROB_TOTAL);
        if q >= self.lo && q <= self.hi() {
            -(f64::from(self.freqs[(q - self.lo) as usize]) / total).log2()
        } else {
            -(f64::from(self.freqs[self.escape()]) / total).log2() + 32.0
        }
    }

    fn encode(&self, enc: &mut RangeEncoder, q: i64) {
        if q >= self.lo && q <= self.hi() {
            let s = (q - self.lo) as usize;
            enc.encode(self.cum[s], self.freqs[s]);
        } else {
            let e = self.escape();
            enc.encode(self.cum[e], self.freqs[e]);
            let raw = q as i32 as u32;
            enc.encode_raw(raw >> 16, 16);
            enc.encode_raw(raw & 0xFFFF, 16);
        }
    }

    fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i64> {
        let s = dec.decode(&self.cum)?;
        if s == self.escape() {
            let hi = dec.decode_raw(16)?;
            let lo = dec.decode_raw(16)?;
            Ok(i64::from(((hi << 16) | lo) as i32))
        } else {
            Ok(self.lo + s as i64)
        }
    }
}

/// Brings the sum to exactly `PROB_TOTAL`, taking from (or giving to) the
/// largest entries first; ties go to the lower index.
fn rebalance(freqs: &mut [u32]) {
    let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
    let mut diff = i64::from(PROB_TOTAL) - sum;
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
    if diff > 0 {
        freqs[order[0]] += diff as u32;
        return;
    }
    while diff < 0 {
        let before = diff;
        for &i in &order {
            if diff == 0 {
                break;
            }
            let room = i64::from(freqs[i]) - 1;
            let take = room.min(-diff).min((i64::from(freqs[i]) / 2).max(1));
            if take > 0 {
                freqs[i] -= take as u32;
                diff += take;
            }
        }
        assert!(diff > before, "frequency table cannot fit {} symbols", freqs.len());
    }
}

/// Tables for the coordinate channel and every feature channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingTables {
    pub coord: SymbolTable,
    pub features: Vec<SymbolTable>,
}

impl CodingTables {
    pub fn from_models(coord: (&FactorizedModel, &Tensor), features: (&FactorizedModel, &Tensor)) -> Self {
        CodingTables {
            coord: SymbolTable::from_model(coord.0, coord.1, 0),
            features: (0..features.0.channels)
                .map(|c| SymbolTable::from_model(features.0, features.1, c))
                .collect(),
        }
    }
}

/// Quantized latent plus everything the decoder needs to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    pub n: u32,
    pub ratios: [f32; 3],
    pub coord_step: f32,
    pub feature_scales: Vec<f32>,
    /// `m x 3`, row-major grid indices.
    pub coords: Vec<i64>,
    /// `m x d`, row-major symbols.
    pub features: Vec<i64>,
}

impl QuantizedLatent {
    pub fn m(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn d(&self) -> usize {
        self.feature_scales.len()
    }

    pub fn coords_tensor(&self) -> Tensor {
        let s = f64::from(self.coord_step);
        Tensor::from_vec(self.m(), 3, self.coords.iter().map(|&q| q as f64 * s).collect())
    }

    pub fn features_tensor(&self) -> Tensor {
        let d = self.d();
        let data = self
            .features
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * f64::from(self.feature_scales[i % d]))
            .collect();
        Tensor::from_vec(self.m(), d, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub version: u8,
    pub n: u32,
    pub m: u32,
    pub ratios: [f32; 3],
    pub coord_step: f32,
    pub feature_scales: Vec<f32>,
    pub digest: [u8; 8],
    pub coord_payload: Vec<u8>,
    pub feature_payload: Vec<u8>,
}

impl Bitstream {
    /// Bytes before the coordinate payload length field.
    pub fn header_len(&self) -> usize {
        4 + 1 + 4 + 4 + 2 + 12 + 4 + 4 * self.feature_scales.len() + 8
    }

    /// Fixed header plus the two payload length fields, in bits.
    pub fn header_bits(&self) -> u64 {
        (self.header_len() as u64 + 8) * 8
    }

    pub fn payload_bits(&self) -> u64 {
        (self.coord_payload.len() + self.feature_payload.len()) as u64 * 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.header_len() + 8 + self.coord_payload.len() + self.feature_payload.len());
        b.extend_from_slice(MAGIC);
        b.push(self.version);
        b.extend_from_slice(&self.n.to_le_bytes());
        b.extend_from_slice(&self.m.to_le_bytes());
        b.extend_from_slice(&(self.feature_scales.len() as u16).to_le_bytes());
        for r in self.ratios {
            b.extend_from_slice(&r.to_le_bytes());
        }
        b.extend_from_slice(&self.coord_step.to_le_bytes());
        for s in &self.feature_scales {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&self.digest);
        for p in [&self.coord_payload, &self.feature_payload] {
            b.extend_from_slice(&(p.len() as u32).to_le_bytes());
            b.extend_from_slice(p);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a COTP bitstream (bad magic)".into()));
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let n = r.u32("point count")?;
        let m = r.u32("latent count")?;
        let d = u16::from_le_bytes(r.array("feature dimension")?);
        let mut ratios = [0f32; 3];
        for x in &mut ratios {
            *x = f32::from_le_bytes(r.array("stage ratio")?);
        }
        let coord_step = f32::from_le_bytes(r.array("coordinate step")?);
        let feature_scales = (0..d)
            .map(|_| Ok(f32::from_le_bytes(r.array("feature scale")?)))
            .collect::<Result<Vec<_>>>()?;
        let digest = r.array("model digest")?;
        let len = r.u32("coordinate payload length")? as usize;
        let coord_payload = r.take(len, "coordinate payload")?.to_vec();
        let len = r.u32("feature payload length")? as usize;
        let feature_payload = r.take(len, "feature payload")?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after payloads", bytes.len() - r.pos)));
        }
        Ok(Bitstream {
            version,
            n,
            m,
            ratios,
            coord_step,
            feature_scales,
            digest,
            coord_payload,
            feature_payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                message: format!("stream ends inside {what} (needs {len} bytes at offset {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

pub fn encode_bitstream(latent: &QuantizedLatent, tables: &CodingTables, digest: [u8; 8]) -> Result<Bitstream> {
    let d = latent.d();
    if tables.features.len() != d {
        return Err(Error::Shape(format!("{d} feature channels but {} coding tables", tables.features.len())));
    }
    if latent.coords.len() % 3 != 0 || latent.features.len() != latent.m() * d {
        return Err(Error::Shape("latent arrays do not match m x 3 and m x d".into()));
    }
    let mut enc = RangeEncoder::new();
    for &q in &latent.coords {
        tables.coord.encode(&mut enc, q);
    }
    let coord_payload = enc.finish();
    let mut enc = RangeEncoder::new();
    for (i, &q) in latent.features.iter().enumerate() {
        tables.features[i % d].encode(&mut enc, q);
    }
    let feature_payload = enc.finish();
    Ok(Bitstream {
        version: VERSION,
        n: latent.n,
        m: latent.m() as u32,
        ratios: latent.ratios,
        coord_step: latent.coord_step,
        feature_scales: latent.feature_scales.clone(),
        digest,
        coord_payload,
        feature_payload,
    })
}

pub fn decode_bitstream(bs: &Bitstream, tables: &CodingTables, digest: [u8; 8]) -> Result<QuantizedLatent> {
    if bs.digest != digest {
        return Err(Error::DigestMismatch {
            expected: crate::nets::hex(&digest),
            found: crate::nets::hex(&bs.digest),
        });
    }
    let d = bs.feature_scales.len();
    if tables.features.len() != d {
        return Err(Error::Shape(format!("{d} feature channels but {} coding tables", tables.features.len())));
    }
    let m = bs.m as usize;
    let coord_base = bs.header_len() + 4;
    let mut dec = RangeDecoder::new(&bs.coord_payload, coord_base)?;
    let coords = (0..m * 3).map(|_| tables.coord.decode(&mut dec)).collect::<Result<Vec<_>>>()?;
    let feat_base = coord_base + bs.coord_payload.len() + 4;
    let mut dec = RangeDecoder::new(&bs.feature_payload, feat_base)?;
    let features = (0..m * d)
        .map(|i| tables.features[i % d].decode(&mut dec))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedLatent {
        n: bs.n,
        ratios: bs.ratios,
        coord_step: bs.coord_step,
        feature_scales: bs.feature_scales.clone(),
        coords,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rebalance_hits_total() {
        let mut f = vec![1u32; 5000];
        f[0] = 70000;
        rebalance(&mut f);
        assert_eq!(f.iter().sum::<u32>(), PROB_TOTAL);
        assert!(f.iter().all(|&x| x >= 1));
        let mut g = vec![3u32, 5, 7];
        rebalance(&mut g);
        assert_eq!(g, vec![3, 5, PROB_TOTAL - 8]);
    }

    #[test]
    fn table_floors_and_escapes() {
        let t = SymbolTable::from_masses(-1, &[0.0, 1.0, 0.0]);
        assert_eq!(t.freqs.len(), 4);
        assert_eq!(t.freqs.iter().sum::<u32>(), PROB_TOTAL);
        assert!(t.freqs.iter().all(|&x| x >= 1));
        assert_eq!(t.hi(), 1);
        assert!(t.cost(0) < 0.001);
        assert!(t.cost(9) > 32.0);
    }
}
