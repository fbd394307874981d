//! Binary sample files: `count: u64`, `τ: u64`, then `count` rows of
//! `series: u64`, `t: u64` and τ values, all little-endian (`f32` values).

use std::io::{Read, Write};
use std::path::Path;

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFile {
    pub tau: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Row-major `[count, τ]`.
    pub values: Vec<f32>,
}

impl SampleFile {
    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        if self.values.len() != self.pairs.len() * self.tau {
            return Err(CliError::Internal(format!(
                "{} values for {} rows of {}",
                self.values.len(),
                self.pairs.len(),
                self.tau
            )));
        }
        w.write_all(&(self.pairs.len() as u64).to_le_bytes())?;
        w.write_all(&(self.tau as u64).to_le_bytes())?;
        for (k, &(s, t)) in self.pairs.iter().enumerate() {
            w.write_all(&(s as u64).to_le_bytes())?;
            w.write_all(&(t as u64).to_le_bytes())?;
            for v in &self.values[k * self.tau..(k + 1) * self.tau] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| CliError::Config(format!("sample file: {m}"));
        let u64_at = |o: usize| -> Result<u64> {
            bytes
                .get(o..o + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated"))
        };
        let count = u64_at(0)? as usize;
        let tau = u64_at(8)? as usize;
        let row = 16 + 4 * tau;
        if tau == 0 || bytes.len() != 16 + count * row {
            return Err(bad(&format!(
                "{} bytes do not hold {count} rows of {tau}",
                bytes.len()
            )));
        }
        let mut pairs = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * tau);
        for k in 0..count {
            let o = 16 + k * row;
            pairs.push((u64_at(o)? as usize, u64_at(o + 8)? as usize));
            values.extend(
                bytes[o + 16..o + row]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
        }
        Ok(SampleFile { tau, pairs, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| CliError::MissingArtifact(format!("samples {}: {e}", path.display())))?;
        Self::read(&mut std::io::BufReader::new(f))
    }
}
