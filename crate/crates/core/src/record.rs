//! Record model and frame codec.
//!
//! Every record is written as a frame: a big-endian `u32` body length
//! followed by the body. Byte strings inside a body are themselves
//! prefixed with a big-endian `u32` length, so a `KvRecord` with a
//! one-byte key and an empty value encodes to 13 bytes.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame length prefix width.
pub const FRAME_HEADER: usize = 4;

/// Sign byte for inserted delta records and valued edges.
pub const SIGN_INSERT: u8 = b'+';
/// Sign byte for deleted delta records and tombstone edges.
pub const SIGN_DELETE: u8 = b'-';

/// Identifies the kind of record stored in a run file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum RecordKind {
    Kv = 1,
    Delta = 2,
    Edge = 3,
    Structure = 4,
}

impl RecordKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(RecordKind::Kv),
            2 => Some(RecordKind::Delta),
            3 => Some(RecordKind::Edge),
            4 => Some(RecordKind::Structure),
            _ => None,
        }
    }
}

/// A serializable record with a defined sort order inside a run.
pub trait Record: Sized + fmt::Debug {
    const KIND: RecordKind;

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()>;

    /// Decodes a body that starts at absolute byte `offset` of the
    /// enclosing buffer; offsets in errors are absolute.
    fn decode_body(body: &[u8], offset: u64) -> Result<Self>;

    /// Run order. Equal elements may repeat in a run.
    fn run_order(&self, other: &Self) -> Ordering;
}

/// A generic key/value pair. Keys are non-empty.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KvRecord {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl KvRecord {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        KvRecord {
            key: key.into(),
            value: value.into(),
        }
    }
}

impl fmt::Debug for KvRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}>", show(&self.key), show(&self.value))
    }
}

/// Insert/delete marker carried by delta records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Insert,
    Delete,
}

impl Sign {
    pub fn byte(self) -> u8 {
        match self {
            Sign::Insert => SIGN_INSERT,
            Sign::Delete => SIGN_DELETE,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            SIGN_INSERT => Some(Sign::Insert),
            SIGN_DELETE => Some(Sign::Delete),
            _ => None,
        }
    }
}

/// Identity of one Map invocation: the input partition and the record's
/// position in it. Stable across re-runs over the same logical input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MapKey {
    pub partition: u32,
    pub sequence: u64,
}

impl MapKey {
    pub const ENCODED_LEN: usize = 12;

    pub fn new(partition: u32, sequence: u64) -> Self {
        MapKey {
            partition,
            sequence,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.partition.to_be_bytes());
        out.extend_from_slice(&self.sequence.to_be_bytes());
    }

    fn decode(cur: &mut Cursor<'_>) -> Result<Self> {
        let partition = cur.u32()?;
        let sequence = cur.u64()?;
        Ok(MapKey {
            partition,
            sequence,
        })
    }
}

impl fmt::Display for MapKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.partition, self.sequence)
    }
}

/// A signed input change. Updates are a delete of the old record followed
/// by an insert of the new one; deletes carry the original record's map key.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DeltaRecord {
    pub record: KvRecord,
    pub sign: Sign,
    pub map_key: MapKey,
}

impl DeltaRecord {
    pub fn insert(record: KvRecord, map_key: MapKey) -> Self {
        DeltaRecord {
            record,
            sign: Sign::Insert,
            map_key,
        }
    }

    pub fn delete(record: KvRecord, map_key: MapKey) -> Self {
        DeltaRecord {
            record,
            sign: Sign::Delete,
            map_key,
        }
    }
}

impl fmt::Debug for DeltaRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<{}, {}, '{}' @{}>",
            show(&self.record.key),
            show(&self.record.value),
            self.sign.byte() as char,
            self.map_key
        )
    }
}

/// Payload of an MRBGraph edge.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeValue {
    /// Deletion marker; only appears in delta streams.
    Tombstone,
    Value(Vec<u8>),
}

impl EdgeValue {
    pub fn as_value(&self) -> Option<&[u8]> {
        match self {
            EdgeValue::Tombstone => None,
            EdgeValue::Value(v) => Some(v),
        }
    }

    pub fn is_tombstone(&self) -> bool {
        matches!(self, EdgeValue::Tombstone)
    }
}

/// One preserved (K2, MK, V2) edge of the Map-to-Reduce bipartite graph.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MrbgEdge {
    pub k2: Vec<u8>,
    pub map_key: MapKey,
    pub value: EdgeValue,
}

impl MrbgEdge {
    pub fn valued(k2: impl Into<Vec<u8>>, map_key: MapKey, value: impl Into<Vec<u8>>) -> Self {
        MrbgEdge {
            k2: k2.into(),
            map_key,
            value: EdgeValue::Value(value.into()),
        }
    }

    pub fn tombstone(k2: impl Into<Vec<u8>>, map_key: MapKey) -> Self {
        MrbgEdge {
            k2: k2.into(),
            map_key,
            value: EdgeValue::Tombstone,
        }
    }

    /// Shuffle order: `(K2, MK)`, tombstone before value for the same edge
    /// so a delete+insert pair applies as a replacement.
    pub fn shuffle_cmp(&self, other: &Self) -> Ordering {
        self.k2
            .cmp(&other.k2)
            .then(self.map_key.cmp(&other.map_key))
            .then_with(|| match (&self.value, &other.value) {
                (EdgeValue::Tombstone, EdgeValue::Tombstone) => Ordering::Equal,
                (EdgeValue::Tombstone, _) => Ordering::Less,
                (_, EdgeValue::Tombstone) => Ordering::Greater,
                (EdgeValue::Value(_), EdgeValue::Value(_)) => Ordering::Equal,
            })
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER
            + 4
            + self.k2.len()
            + MapKey::ENCODED_LEN
            + 1
            + self.value.as_value().map_or(0, |v| 4 + v.len())
    }
}

impl fmt::Debug for MrbgEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            EdgeValue::Tombstone => write!(f, "<{}, {}, '-'>", show(&self.k2), self.map_key),
            EdgeValue::Value(v) => write!(f, "<{}, {}, {}>", show(&self.k2), self.map_key, show(v)),
        }
    }
}

/// A partitioned structure record, tagged with its projected state key
/// so structure files sort in the same order as state files.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct StructureEntry {
    pub dk: Vec<u8>,
    pub sk: Vec<u8>,
    pub sv: Vec<u8>,
    pub map_key: MapKey,
}

impl fmt::Debug for StructureEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<{} -> {}, {} @{}>",
            show(&self.sk),
            show(&self.dk),
            show(&self.sv),
            self.map_key
        )
    }
}

impl Record for KvRecord {
    const KIND: RecordKind = RecordKind::Kv;

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()> {
        put_key(out, &self.key)?;
        put_bytes(out, "value", &self.value)
    }

    fn decode_body(body: &[u8], offset: u64) -> Result<Self> {
        let mut cur = Cursor::new(body, offset);
        let key = cur.bytes()?;
        let value = cur.bytes()?;
        cur.finish()?;
        Ok(KvRecord { key, value })
    }

    fn run_order(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

impl Record for DeltaRecord {
    const KIND: RecordKind = RecordKind::Delta;

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()> {
        out.push(self.sign.byte());
        self.map_key.encode(out);
        self.record.encode_body(out)
    }

    fn decode_body(body: &[u8], offset: u64) -> Result<Self> {
        let mut cur = Cursor::new(body, offset);
        let sign_at = cur.position();
        let sign = Sign::from_byte(cur.u8()?)
            .ok_or_else(|| Error::corrupt(sign_at, "unknown sign byte"))?;
        let map_key = MapKey::decode(&mut cur)?;
        let key = cur.bytes()?;
        let value = cur.bytes()?;
        cur.finish()?;
        Ok(DeltaRecord {
            record: KvRecord { key, value },
            sign,
            map_key,
        })
    }

    fn run_order(&self, other: &Self) -> Ordering {
        self.record.key.cmp(&other.record.key)
    }
}

impl Record for MrbgEdge {
    const KIND: RecordKind = RecordKind::Edge;

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()> {
        put_key(out, &self.k2)?;
        self.map_key.encode(out);
        match &self.value {
            EdgeValue::Tombstone => out.push(SIGN_DELETE),
            EdgeValue::Value(v) => {
                out.push(SIGN_INSERT);
                put_bytes(out, "value", v)?;
            }
        }
        Ok(())
    }

    fn decode_body(body: &[u8], offset: u64) -> Result<Self> {
        let mut cur = Cursor::new(body, offset);
        let k2 = cur.bytes()?;
        let map_key = MapKey::decode(&mut cur)?;
        let tag_at = cur.position();
        let value = match cur.u8()? {
            SIGN_DELETE => EdgeValue::Tombstone,
            SIGN_INSERT => EdgeValue::Value(cur.bytes()?),
            _ => return Err(Error::corrupt(tag_at, "unknown edge tag")),
        };
        cur.finish()?;
        Ok(MrbgEdge { k2, map_key, value })
    }

    fn run_order(&self, other: &Self) -> Ordering {
        self.shuffle_cmp(other)
    }
}

impl Record for StructureEntry {
    const KIND: RecordKind = RecordKind::Structure;

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()> {
        put_key(out, &self.dk)?;
        put_key(out, &self.sk)?;
        put_bytes(out, "structure value", &self.sv)?;
        self.map_key.encode(out);
        Ok(())
    }

    fn decode_body(body: &[u8], offset: u64) -> Result<Self> {
        let mut cur = Cursor::new(body, offset);
        let dk = cur.bytes()?;
        let sk = cur.bytes()?;
        let sv = cur.bytes()?;
        let map_key = MapKey::decode(&mut cur)?;
        cur.finish()?;
        Ok(StructureEntry {
            dk,
            sk,
            sv,
            map_key,
        })
    }

    fn run_order(&self, other: &Self) -> Ordering {
        self.dk.cmp(&other.dk).then_with(|| self.sk.cmp(&other.sk))
    }
}

/// Encodes `record` as a self-delimiting frame.
pub fn encode_record<R: Record>(record: &R) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32);
    encode_record_into(record, &mut out)?;
    Ok(out)
}

/// Appends the frame for `record` to `out`.
pub fn encode_record_into<R: Record>(record: &R, out: &mut Vec<u8>) -> Result<()> {
    let start = out.len();
    out.extend_from_slice(&[0; FRAME_HEADER]);
    record.encode_body(out)?;
    let body_len = out.len() - start - FRAME_HEADER;
    let body_len = u32::try_from(body_len).map_err(|_| Error::EncodingLimit {
        field: "frame",
        len: body_len,
    })?;
    out[start..start + FRAME_HEADER].copy_from_slice(&body_len.to_be_bytes());
    Ok(())
}

/// Decodes one frame from the front of `bytes`, returning the record and
/// the number of bytes consumed.
pub fn decode_record<R: Record>(bytes: &[u8]) -> Result<(R, usize)> {
    decode_record_at(bytes, 0)
}

/// Like [`decode_record`], with `base` added to every error offset.
pub fn decode_record_at<R: Record>(bytes: &[u8], base: u64) -> Result<(R, usize)> {
    let mut cur = Cursor::new(bytes, base);
    let body_len = cur.u32()? as usize;
    let available = bytes.len() - FRAME_HEADER;
    // Parse against what is actually present so a truncated frame reports
    // the field that runs off the end.
    let body = &bytes[FRAME_HEADER..FRAME_HEADER + body_len.min(available)];
    let record = R::decode_body(body, base + FRAME_HEADER as u64)?;
    if body_len > available {
        return Err(Error::corrupt(
            base + bytes.len() as u64,
            format!("frame declares {body_len} body bytes, {available} present"),
        ));
    }
    Ok((record, FRAME_HEADER + body_len))
}

fn put_key(out: &mut Vec<u8>, key: &[u8]) -> Result<()> {
    if key.is_empty() {
        return Err(Error::EmptyKey);
    }
    put_bytes(out, "key", key)
}

fn put_bytes(out: &mut Vec<u8>, field: &'static str, bytes: &[u8]) -> Result<()> {
    let len = check_len(field, bytes.len())?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

/// Checks that a field length fits the `u32` length prefix.
pub fn check_len(field: &'static str, len: usize) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::EncodingLimit { field, len })
}

/// Bounds-checked big-endian reader that reports absolute offsets.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], base: u64) -> Self {
        Cursor { buf, pos: 0, base }
    }

    pub(crate) fn position(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(
                self.position(),
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::corrupt(self.position(), "trailing bytes in frame body"))
        }
    }
}

/// Lossy printable form of a byte string for diagnostics.
pub fn show(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => format!("{s:?}"),
        Err(_) => format!("0x{}", hex::encode(bytes)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_value_frame_is_13_bytes() {
        let bytes = encode_record(&KvRecord::new("a", "")).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[..4], &9u32.to_be_bytes());
        assert_eq!(&bytes[9..], &0u32.to_be_bytes());
    }

    #[test]
    fn delete_sign_byte() {
        let d = DeltaRecord::delete(KvRecord::new("v1", "2:0.4"), MapKey::new(0, 1));
        let bytes = encode_record(&d).unwrap();
        assert_eq!(bytes[FRAME_HEADER], 0x2D);
        let (back, used) = decode_record::<DeltaRecord>(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn trivial_round_trip() {
        let r = KvRecord::new("k", "v");
        let (back, _) = decode_record::<KvRecord>(&encode_record(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn truncated_mid_value_reports_offset() {
        let bytes = encode_record(&KvRecord::new("ab", "xyz")).unwrap();
        // frame(4) + klen(4) + "ab"(2) + vlen(4) puts the value at 14
        let err = decode_record::<KvRecord>(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            Error::CorruptFrame { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
        let err = decode_record_at::<KvRecord>(&bytes[..16], 100).unwrap_err();
        assert!(matches!(err, Error::CorruptFrame { offset: 114, .. }));
    }

    #[test]
    fn truncated_header() {
        let err = decode_record::<KvRecord>(&[0, 0]).unwrap_err();
        assert!(matches!(err, Error::CorruptFrame { offset: 0, .. }));
    }

    #[test]
    fn tombstone_edge_has_no_value() {
        let e = MrbgEdge::tombstone("2", MapKey::new(0, 0));
        let bytes = encode_record(&e).unwrap();
        assert_eq!(bytes.len(), e.encoded_len());
        assert_eq!(*bytes.last().unwrap(), SIGN_DELETE);
        let (back, _) = decode_record::<MrbgEdge>(&bytes).unwrap();
        assert!(back.value.is_tombstone());
        assert_eq!(back, e);
    }

    #[test]
    fn empty_key_rejected() {
        assert!(matches!(
            encode_record(&KvRecord::new("", "v")),
            Err(Error::EmptyKey)
        ));
    }

    #[test]
    fn length_limit() {
        assert!(check_len("value", u32::MAX as usize).is_ok());
        assert!(matches!(
            check_len("value", u32::MAX as usize + 1),
            Err(Error::EncodingLimit { len, .. }) if len == u32::MAX as usize + 1
        ));
    }

    #[test]
    fn tombstone_sorts_before_value() {
        let mk = MapKey::new(0, 0);
        let t = MrbgEdge::tombstone("2", mk);
        let v = MrbgEdge::valued("2", mk, "0.6");
        assert_eq!(t.shuffle_cmp(&v), Ordering::Less);
        let later = MrbgEdge::tombstone("2", MapKey::new(0, 1));
        assert_eq!(v.shuffle_cmp(&later), Ordering::Less);
    }

    #[test]
    fn unknown_sign_is_corrupt() {
        let mut bytes =
            encode_record(&DeltaRecord::insert(KvRecord::new("a", "b"), MapKey::default())).unwrap();
        bytes[FRAME_HEADER] = b'?';
        assert!(matches!(
            decode_record::<DeltaRecord>(&bytes),
            Err(Error::CorruptFrame { offset: 4, .. })
        ));
    }
}
