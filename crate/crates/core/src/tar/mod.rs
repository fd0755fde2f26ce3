//! Deterministic USTAR/PAX encoding of ordered batch output.
//!
//! Every header carries constant metadata (mode 0644, uid/gid 0, mtime 0) so
//! identical entry sequences always produce byte-identical archives. Names
//! longer than 100 bytes and payloads of 8 GiB or more get a PAX extended
//! header. Soft-error placeholders are zero-length entries whose PAX header
//! carries `GETBATCH.status=soft-error:<reason>`.

mod reader;

use std::io::{self, Write};

use bytes::Bytes;
use thiserror::Error;

pub use reader::{
    find_member, parse_archive, ArchiveEntry, EntryHeader, ReadError, TarReader,
};

pub const BLOCK: usize = 512;
pub const MAX_NAME_LEN: usize = 10_000;
/// PAX key marking a placeholder entry.
pub const STATUS_KEY: &str = "GETBATCH.status";
pub const SOFT_ERROR_PREFIX: &str = "soft-error:";

const NAME_FIELD: usize = 100;
/// Largest size representable in the 11-digit octal size field.
const USTAR_MAX_SIZE: u64 = 0o77777777777;
const PAX_HEADER_NAME: &str = "././@PaxHeader";
static ZEROS: [u8; 2 * BLOCK] = [0; 2 * BLOCK];

#[derive(Debug, Error)]
pub enum TarError {
    #[error("archive already finalized")]
    Finalized,
    #[error("entry name is {0} bytes, limit is {MAX_NAME_LEN}")]
    NameTooLong(usize),
    #[error("entry name is empty")]
    EmptyName,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bytes of one encoded entry: headers, payload and block padding.
#[derive(Debug, Clone)]
pub struct EncodedEntry {
    pub header: Bytes,
    pub payload: Bytes,
    pub padding: Bytes,
}

impl EncodedEntry {
    pub fn len(&self) -> u64 {
        (self.header.len() + self.payload.len() + self.padding.len()) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-empty chunks in wire order.
    pub fn into_chunks(self) -> impl Iterator<Item = Bytes> {
        [self.header, self.payload, self.padding]
            .into_iter()
            .filter(|b| !b.is_empty())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.header)?;
        w.write_all(&self.payload)?;
        w.write_all(&self.padding)
    }
}

/// Sink-free TAR state machine: turns entries into byte chunks and tracks the
/// running length. Used directly by the streaming emitter and wrapped by
/// [`TarWriter`] for `io::Write` sinks.
#[derive(Debug, Default)]
pub struct TarEncoder {
    bytes_written: u64,
    finalized: bool,
}

impl TarEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn entry(&mut self, name: &str, payload: Bytes) -> Result<EncodedEntry, TarError> {
        self.encode(name, payload, None)
    }

    pub fn placeholder(&mut self, name: &str, reason: &str) -> Result<EncodedEntry, TarError> {
        let status = format!("{SOFT_ERROR_PREFIX}{reason}");
        self.encode(name, Bytes::new(), Some(&status))
    }

    pub fn finalize(&mut self) -> Result<Bytes, TarError> {
        if self.finalized {
            return Err(TarError::Finalized);
        }
        self.finalized = true;
        self.bytes_written += ZEROS.len() as u64;
        Ok(Bytes::from_static(&ZEROS))
    }

    fn encode(
        &mut self,
        name: &str,
        payload: Bytes,
        status: Option<&str>,
    ) -> Result<EncodedEntry, TarError> {
        if self.finalized {
            return Err(TarError::Finalized);
        }
        if name.is_empty() {
            return Err(TarError::EmptyName);
        }
        if name.len() > MAX_NAME_LEN {
            return Err(TarError::NameTooLong(name.len()));
        }
        let size = payload.len() as u64;
        let mut records = Vec::new();
        if name.len() > NAME_FIELD {
            records.extend(pax_record("path", name));
        }
        if size > USTAR_MAX_SIZE {
            records.extend(pax_record("size", &size.to_string()));
        }
        if let Some(s) = status {
            records.extend(pax_record(STATUS_KEY, s));
        }

        let mut header = Vec::with_capacity(BLOCK * 3);
        if !records.is_empty() {
            header.extend_from_slice(&ustar_header(
                PAX_HEADER_NAME.as_bytes(),
                records.len() as u64,
                b'x',
            ));
            let pad = padding_len(records.len() as u64);
            header.extend_from_slice(&records);
            header.extend_from_slice(&ZEROS[..pad]);
        }
        let name_bytes = name.as_bytes();
        let short = &name_bytes[..name_bytes.len().min(NAME_FIELD)];
        let header_size = if size > USTAR_MAX_SIZE { 0 } else { size };
        header.extend_from_slice(&ustar_header(short, header_size, b'0'));

        let padding = Bytes::from_static(&ZEROS[..padding_len(size)]);
        let out = EncodedEntry {
            header: Bytes::from(header),
            payload,
            padding,
        };
        self.bytes_written += out.len();
        Ok(out)
    }
}

/// Zero bytes needed after `len` bytes of data to reach a block boundary.
pub fn padding_len(len: u64) -> usize {
    let rem = (len % BLOCK as u64) as usize;
    if rem == 0 {
        0
    } else {
        BLOCK - rem
    }
}

/// One PAX record: `"<len> <key>=<value>\n"` where `<len>` counts itself.
pub fn pax_record(key: &str, value: &str) -> Vec<u8> {
    let rest = key.len() + value.len() + 3; // space, '=', '\n'
    let mut len = rest + 1;
    while len != rest + len.to_string().len() {
        len = rest + len.to_string().len();
    }
    format!("{len} {key}={value}\n").into_bytes()
}

fn write_octal(field: &mut [u8], value: u64) {
    let digits = field.len() - 1;
    let s = format!("{value:0digits$o}");
    field[..digits].copy_from_slice(s.as_bytes());
    field[digits] = 0;
}

fn ustar_header(name: &[u8], size: u64, typeflag: u8) -> [u8; BLOCK] {
    let mut h = [0u8; BLOCK];
    h[..name.len()].copy_from_slice(name);
    write_octal(&mut h[100..108], 0o644);
    write_octal(&mut h[108..116], 0);
    write_octal(&mut h[116..124], 0);
    write_octal(&mut h[124..136], size);
    write_octal(&mut h[136..148], 0);
    h[156] = typeflag;
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    write_octal(&mut h[329..337], 0);
    write_octal(&mut h[337..345], 0);
    h[148..156].fill(b' ');
    let sum: u32 = h.iter().map(|&b| u32::from(b)).sum();
    let ck = format!("{sum:06o}\0 ");
    h[148..156].copy_from_slice(ck.as_bytes());
    h
}

/// [`TarEncoder`] bound to an `io::Write` sink.
pub struct TarWriter<W: Write> {
    sink: W,
    enc: TarEncoder,
}

impl<W: Write> TarWriter<W> {
    pub fn new(sink: W) -> Self {
        TarWriter {
            sink,
            enc: TarEncoder::new(),
        }
    }

    pub fn bytes_written(&self) -> u64 {
        self.enc.bytes_written()
    }

    pub fn emit_entry(&mut self, name: &str, payload: &[u8]) -> Result<(), TarError> {
        let e = self.enc.entry(name, Bytes::copy_from_slice(payload))?;
        e.write_to(&mut self.sink)?;
        Ok(())
    }

    pub fn emit_placeholder(&mut self, name: &str, reason: &str) -> Result<(), TarError> {
        let e = self.enc.placeholder(name, reason)?;
        e.write_to(&mut self.sink)?;
        Ok(())
    }

    /// Writes the two zero blocks and returns the archive length.
    pub fn finalize(&mut self) -> Result<u64, TarError> {
        let tail = self.enc.finalize()?;
        self.sink.write_all(&tail)?;
        self.sink.flush()?;
        Ok(self.enc.bytes_written())
    }

    pub fn get_ref(&self) -> &W {
        &self.sink
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}
