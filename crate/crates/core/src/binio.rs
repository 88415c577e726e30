//! Little-endian primitives shared by the checkpoint and index formats.

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// What the reader was looking for when the input ran out.
#[derive(Debug)]
pub(crate) struct Truncated(pub String);

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, Truncated> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32, Truncated> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, Truncated> {
        let len = n.checked_mul(4).ok_or_else(|| Truncated(format!("{what}: length overflow")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Length-prefixed UTF-8; `None` when the bytes are not valid UTF-8.
    pub fn str(&mut self, what: &str) -> Result<Option<String>, Truncated> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        Ok(String::from_utf8(b.to_vec()).ok())
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
