//! GetBatch request/response model.
//!
//! A request is a JSON document carried in the body of an HTTP GET:
//!
//! ```json
//! {"mime": "tar",
//!  "in": [{"bucket": "imagenet", "objname": "images/img_0001.jpg"},
//!         {"bucket": "shards", "objname": "train-0003.tar", "archpath": "labels/0003.txt"}],
//!  "strm": true, "coer": false, "coloc": 2}
//! ```
//!
//! Entry order is significant: the response carries entries in exactly this
//! order, placeholders included.

use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on a request body.
pub const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("malformed request body: {0}")]
    Parse(String),
    #[error("unsupported output mime {0:?} (only \"tar\" is supported)")]
    UnsupportedMime(String),
    #[error("invalid request: {0}")]
    Validation(String),
}

/// Address of one retrievable item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub bucket: String,
    pub objname: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archpath: Option<String>,
}

impl ObjectRef {
    pub fn new(bucket: impl Into<String>, objname: impl Into<String>) -> Self {
        ObjectRef {
            bucket: bucket.into(),
            objname: objname.into(),
            archpath: None,
        }
    }

    pub fn member(
        bucket: impl Into<String>,
        objname: impl Into<String>,
        archpath: impl Into<String>,
    ) -> Self {
        ObjectRef {
            bucket: bucket.into(),
            objname: objname.into(),
            archpath: Some(archpath.into()),
        }
    }

    pub fn is_member(&self) -> bool {
        self.archpath.is_some()
    }

    /// Same object with the archive path dropped.
    pub fn object(&self) -> ObjectRef {
        ObjectRef::new(self.bucket.clone(), self.objname.clone())
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        check_name("bucket", &self.bucket)?;
        check_name("objname", &self.objname)?;
        if let Some(ap) = &self.archpath {
            check_name("archpath", ap)?;
        }
        Ok(())
    }
}

fn check_name(field: &str, value: &str) -> Result<(), RequestError> {
    if value.is_empty() {
        return Err(RequestError::Validation(format!("{field} is empty")));
    }
    if value.starts_with('/') {
        return Err(RequestError::Validation(format!(
            "{field} {value:?} has a leading slash"
        )));
    }
    if value.chars().any(char::is_control) {
        return Err(RequestError::Validation(format!(
            "{field} {value:?} contains control characters"
        )));
    }
    Ok(())
}

/// Output name of an entry inside the response archive.
///
/// `<bucket>/<objname>` for whole objects and `<bucket>/<objname>/<archpath>`
/// for shard members.
pub fn canonical_entry_name(e: &ObjectRef) -> String {
    match &e.archpath {
        None => format!("{}/{}", e.bucket, e.objname),
        Some(ap) => format!("{}/{}/{}", e.bucket, e.objname, ap),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mime {
    #[default]
    Tar,
}

impl Mime {
    pub fn as_str(self) -> &'static str {
        match self {
            Mime::Tar => "tar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchRequest {
    pub mime: Mime,
    #[serde(rename = "in")]
    pub entries: Vec<ObjectRef>,
    pub strm: bool,
    pub coer: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coloc: Option<u64>,
}

impl BatchRequest {
    pub fn new(entries: Vec<ObjectRef>) -> Self {
        BatchRequest {
            mime: Mime::Tar,
            entries,
            strm: false,
            coer: false,
            coloc: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Colocation-aware routing is an opt-in; any hint >= 1 enables it.
    pub fn wants_colocation(&self) -> bool {
        self.coloc.is_some_and(|c| c >= 1)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("batch request serializes")
    }
}

#[derive(Deserialize)]
struct RawRequest {
    #[serde(default)]
    mime: Option<String>,
    #[serde(default, rename = "in")]
    entries: Option<Vec<ObjectRef>>,
    #[serde(default)]
    strm: bool,
    #[serde(default)]
    coer: bool,
    #[serde(default)]
    coloc: Option<u64>,
}

/// Parses and validates a GetBatch body. Unknown keys are ignored.
pub fn parse_batch_request(body: &[u8]) -> Result<BatchRequest, RequestError> {
    let text = std::str::from_utf8(body)
        .map_err(|e| RequestError::Parse(format!("body is not UTF-8: {e}")))?;
    let raw: RawRequest =
        serde_json::from_str(text).map_err(|e| RequestError::Parse(e.to_string()))?;
    let mime = match raw.mime.as_deref() {
        None | Some("tar") => Mime::Tar,
        Some(other) => return Err(RequestError::UnsupportedMime(other.to_string())),
    };
    let entries = match raw.entries {
        Some(v) if !v.is_empty() => v,
        Some(_) => return Err(RequestError::Validation("empty \"in\" list".into())),
        None => return Err(RequestError::Validation("missing \"in\" list".into())),
    };
    for (i, e) in entries.iter().enumerate() {
        e.validate().map_err(|err| match err {
            RequestError::Validation(m) => RequestError::Validation(format!("entry {i}: {m}")),
            other => other,
        })?;
    }
    Ok(BatchRequest {
        mime,
        entries,
        strm: raw.strm,
        coer: raw.coer,
        coloc: raw.coloc,
    })
}

/// Opaque 128-bit execution identifier, printed as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExecutionId(pub u128);

impl ExecutionId {
    pub fn random() -> Self {
        ExecutionId(rand::random())
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        ExecutionId(u128::from_be_bytes(b))
    }
}

impl fmt::Display for ExecutionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for ExecutionId {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 {
            return Err(RequestError::Parse(format!("bad execution id {s:?}")));
        }
        u128::from_str_radix(s, 16)
            .map(ExecutionId)
            .map_err(|_| RequestError::Parse(format!("bad execution id {s:?}")))
    }
}

impl Serialize for ExecutionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExecutionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Ok,
    SoftError,
}

/// One resolved slot of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItemResult {
    pub index: usize,
    pub name: String,
    pub status: ItemStatus,
    pub error_reason: Option<String>,
    pub payload: Bytes,
}

impl BatchItemResult {
    pub fn ok(index: usize, name: String, payload: Bytes) -> Self {
        BatchItemResult {
            index,
            name,
            status: ItemStatus::Ok,
            error_reason: None,
            payload,
        }
    }

    pub fn soft_error(index: usize, name: String, reason: impl Into<String>) -> Self {
        BatchItemResult {
            index,
            name,
            status: ItemStatus::SoftError,
            error_reason: Some(reason.into()),
            payload: Bytes::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ItemStatus::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ENTRIES: &str = r#"{
      "mime": "tar",
      "in": [
        {"bucket": "imagenet",
         "objname": "images/img_0001.jpg"},
        {"bucket": "imagenet",
         "objname": "images/img_0002.jpg"},
        {"bucket": "shards",
         "objname": "train-0003.tar",
         "archpath": "labels/0003.txt"},
        {"bucket": "shards",
         "objname": "train-0003.tar",
         "archpath": "images/0003.jpg"}
      ],
      "strm": true,
      "coer": false,
      "coloc": 2
    }"#;

    #[test]
    fn parses_four_entry_request() {
        let r = parse_batch_request(FOUR_ENTRIES.as_bytes()).unwrap();
        assert_eq!(r.mime, Mime::Tar);
        assert_eq!(r.len(), 4);
        assert!(r.strm);
        assert!(!r.coer);
        assert_eq!(r.coloc, Some(2));
        assert_eq!(r.entries[0], ObjectRef::new("imagenet", "images/img_0001.jpg"));
        assert_eq!(r.entries[1], ObjectRef::new("imagenet", "images/img_0002.jpg"));
        assert_eq!(
            r.entries[2],
            ObjectRef::member("shards", "train-0003.tar", "labels/0003.txt")
        );
        assert_eq!(
            r.entries[3],
            ObjectRef::member("shards", "train-0003.tar", "images/0003.jpg")
        );
    }

    #[test]
    fn defaults_when_flags_missing() {
        let r = parse_batch_request(br#"{"mime":"tar","in":[{"bucket":"b","objname":"o"}]}"#)
            .unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r.strm && !r.coer);
        assert_eq!(r.coloc, None);
        assert!(!r.wants_colocation());
    }

    #[test]
    fn rejects_zip() {
        let err = parse_batch_request(br#"{"mime":"zip","in":[{"bucket":"b","objname":"o"}]}"#)
            .unwrap_err();
        assert_eq!(err, RequestError::UnsupportedMime("zip".into()));
    }

    #[test]
    fn rejects_empty_and_missing_in() {
        assert!(matches!(
            parse_batch_request(br#"{"mime":"tar","in":[]}"#),
            Err(RequestError::Validation(_))
        ));
        assert!(matches!(
            parse_batch_request(br#"{"mime":"tar"}"#),
            Err(RequestError::Validation(_))
        ));
    }

    #[test]
    fn rejects_malformed_json_and_bad_names() {
        assert!(matches!(
            parse_batch_request(b"{not json"),
            Err(RequestError::Parse(_))
        ));
        assert!(matches!(
            parse_batch_request(br#"{"in":[{"bucket":"/b","objname":"o"}]}"#),
            Err(RequestError::Validation(_))
        ));
        assert!(matches!(
            parse_batch_request(br#"{"in":[{"bucket":"b","objname":"o\u0001"}]}"#),
            Err(RequestError::Validation(_))
        ));
        assert!(matches!(
            parse_batch_request(br#"{"in":[{"bucket":"b","objname":"o","archpath":""}]}"#),
            Err(RequestError::Validation(_))
        ));
        assert!(matches!(
            parse_batch_request(br#"{"in":[{"bucket":"b","objname":"o"}],"coloc":-1}"#),
            Err(RequestError::Parse(_))
        ));
    }

    #[test]
    fn unknown_keys_ignored() {
        let r = parse_batch_request(
            br#"{"in":[{"bucket":"b","objname":"o","extra":1}],"whatever":[1,2]}"#,
        )
        .unwrap();
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn entry_names() {
        assert_eq!(
            canonical_entry_name(&ObjectRef::new("imagenet", "images/img_0001.jpg")),
            "imagenet/images/img_0001.jpg"
        );
        assert_eq!(
            canonical_entry_name(&ObjectRef::member("shards", "train-0003.tar", "labels/0003.txt")),
            "shards/train-0003.tar/labels/0003.txt"
        );
        let a = ObjectRef::new("b", "o");
        assert_eq!(canonical_entry_name(&a), canonical_entry_name(&a.clone()));
    }

    #[test]
    fn execution_id_hex_round_trip() {
        let id = ExecutionId(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
        let s = id.to_string();
        assert_eq!(s, "0123456789abcdef0011223344556677");
        assert_eq!(s.parse::<ExecutionId>().unwrap(), id);
        assert_eq!(ExecutionId::from_bytes(id.to_bytes()), id);
        assert!("xyz".parse::<ExecutionId>().is_err());
        assert_ne!(ExecutionId::random(), ExecutionId::random());
    }
}
