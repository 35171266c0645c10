//! Canonical length-prefixed binary encoding.
//!
//! Every field is written as a 4-byte big-endian length followed by the raw
//! field bytes, in fixed declaration order. Integers are 8-byte big-endian
//! two's complement (so they always carry a length prefix of 8). Nested
//! records are encoded as a single bytes field holding their own encoding.
//! The layout is bijective: decoding requires every byte to be consumed.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing bytes after record")]
    TrailingBytes(usize),
    #[error("field length {got}, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("invalid utf-8 in string field")]
    BadUtf8,
    #[error("unknown tag `{0}`")]
    BadTag(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Encoder { buf: Vec::with_capacity(cap) }
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        let len = u32::try_from(b.len()).expect("field larger than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u64(v as u64)
    }

    /// Encodes a nested record as one length-prefixed field.
    pub fn nested(&mut self, f: impl FnOnce(&mut Encoder)) -> &mut Self {
        let mut inner = Encoder::new();
        f(&mut inner);
        self.bytes(&inner.buf)
    }

    pub fn item<T: Canonical>(&mut self, v: &T) -> &mut Self {
        self.nested(|e| v.encode(e))
    }

    pub fn list<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.u64(items.len() as u64);
        for it in items {
            self.item(it);
        }
        self
    }

    pub fn option<T: Canonical>(&mut self, v: Option<&T>) -> &mut Self {
        match v {
            None => self.bool(false),
            Some(x) => self.bool(true).item(x),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let rest = &self.buf[self.pos..];
        if rest.len() < 4 {
            return Err(CodecError::Truncated);
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        if rest.len() - 4 < len {
            return Err(CodecError::Truncated);
        }
        self.pos += 4 + len;
        Ok(&rest[4..4 + len])
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let b = self.bytes()?;
        b.try_into().map_err(|_| CodecError::BadLength { expected: N, got: b.len() })
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let b = self.bytes()?;
        std::str::from_utf8(b).map(str::to_owned).map_err(|_| CodecError::BadUtf8)
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        self.fixed::<8>().map(u64::from_be_bytes)
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        self.fixed::<8>().map(i64::from_be_bytes)
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u64()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(CodecError::Invalid(format!("bool {v}"))),
        }
    }

    pub fn nested(&mut self) -> Result<Decoder<'a>, CodecError> {
        self.bytes().map(Decoder::new)
    }

    pub fn item<T: Canonical>(&mut self) -> Result<T, CodecError> {
        let mut d = self.nested()?;
        let v = T::decode(&mut d)?;
        d.finish()?;
        Ok(v)
    }

    pub fn list<T: Canonical>(&mut self) -> Result<Vec<T>, CodecError> {
        let n = self.u64()?;
        // Each item needs at least a 4-byte prefix; reject absurd counts early.
        if n > (self.remaining() / 4) as u64 {
            return Err(CodecError::Truncated);
        }
        (0..n).map(|_| self.item()).collect()
    }

    pub fn option<T: Canonical>(&mut self) -> Result<Option<T>, CodecError> {
        if self.bool()? {
            self.item().map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

/// A type with a canonical byte layout.
pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    fn from_bytes(b: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(b);
        let v = Self::decode(&mut d)?;
        d.finish()?;
        Ok(v)
    }
}

impl Canonical for String {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.str()
    }
}

impl Canonical for u64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(*self);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u64()
    }
}

impl Canonical for i64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.i64(*self);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.i64()
    }
}

impl<A: Canonical, B: Canonical> Canonical for (A, B) {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.0).item(&self.1);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok((dec.item()?, dec.item()?))
    }
}
