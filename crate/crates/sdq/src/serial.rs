//! Little-endian byte-stream helpers shared by the checkpoint and
//! integer-model file formats. Writers are infallible (they build a buffer);
//! readers return offset-tagged errors so corrupt files are diagnosable.

use crate::quant::{QuantMode, QuantizerState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadError {
    pub offset: usize,
    pub msg: String,
}

impl std::fmt::Display for ReadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "corrupt stream at byte {}: {}", self.offset, self.msg)
    }
}

impl std::error::Error for ReadError {}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    /// f64 as raw IEEE bits; the round trip is exact for every value
    /// including negative zero and NaN payloads.
    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn f64_slice(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }

    pub fn usize_slice(&mut self, xs: &[usize]) {
        self.usize(xs.len());
        for &x in xs {
            self.usize(x);
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ReadError> {
        Err(ReadError { offset: self.pos, msg: msg.into() })
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ReadError> {
        if self.pos + n > self.buf.len() {
            return self.err(format!("need {} bytes, {} left", n, self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, ReadError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, ReadError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => {
                self.pos -= 1;
                self.err(format!("bool byte must be 0 or 1, got {v}"))
            }
        }
    }

    pub fn u32(&mut self) -> Result<u32, ReadError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ReadError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, ReadError> {
        Ok(i64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, ReadError> {
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| {
            self.pos -= 8;
            self.err(format!("length {v} exceeds usize"))
        })
    }

    pub fn f64(&mut self) -> Result<f64, ReadError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>, ReadError> {
        let n = self.usize()?;
        if self.pos + n.saturating_mul(8) > self.buf.len() {
            return self.err(format!("f64 slice of {n} entries overruns file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usize_vec(&mut self) -> Result<Vec<usize>, ReadError> {
        let n = self.usize()?;
        if self.pos + n.saturating_mul(8) > self.buf.len() {
            return self.err(format!("usize slice of {n} entries overruns file"));
        }
        (0..n).map(|_| self.usize()).collect()
    }

    /// Fails if any input remains; formats append nothing after the payload.
    pub fn finish(&self) -> Result<(), ReadError> {
        if self.pos != self.buf.len() {
            return Err(ReadError {
                offset: self.pos,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Serializes a quantizer state; shared by the checkpoint and integer-model
/// formats so both round-trip the exact same bits.
pub fn put_quantizer(w: &mut Writer, st: &QuantizerState) {
    w.f64(st.alpha);
    w.f64(st.sigma);
    w.u8(st.bits);
    w.bool(st.signed);
    w.u8(match st.mode {
        QuantMode::Uniform => 0,
        QuantMode::Log2 => 1,
    });
    w.f64(st.grad_scale);
    w.f64(st.weight_decay);
    w.bool(st.frozen);
    w.bool(st.grad_passthrough);
}

pub fn get_quantizer(r: &mut Reader) -> Result<QuantizerState, ReadError> {
    let alpha = r.f64()?;
    let sigma = r.f64()?;
    let bits = r.u8()?;
    let signed = r.bool()?;
    let mode_tag = r.u8()?;
    let bad = |r: &Reader, msg: String| ReadError { offset: r.offset(), msg };
    let mode = match mode_tag {
        0 => QuantMode::Uniform,
        1 => QuantMode::Log2,
        v => return Err(bad(r, format!("unknown quantizer mode {v}"))),
    };
    let mut st = if signed {
        QuantizerState::signed(bits, mode).map_err(|e| bad(r, e.to_string()))?
    } else {
        if mode != QuantMode::Uniform {
            return Err(bad(r, "unsigned quantizer must be uniform".into()));
        }
        QuantizerState::unsigned(bits).map_err(|e| bad(r, e.to_string()))?
    };
    st.alpha = alpha;
    st.sigma = sigma;
    st.grad_scale = r.f64()?;
    st.weight_decay = r.f64()?;
    st.frozen = r.bool()?;
    st.grad_passthrough = r.bool()?;
    Ok(st)
}
