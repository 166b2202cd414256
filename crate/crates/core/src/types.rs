//! Domain values shared by every subsystem: field values, stream items,
//! batches, stream descriptions, diagnostics and the FIFO [`Buffer`].

use std::collections::VecDeque;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Returns true when `s` matches `[a-z][a-z0-9_]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Audio,
}

impl MediaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaKind::Image => "image",
            MediaKind::Audio => "audio",
        }
    }
}

impl fmt::Display for MediaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error("number must be finite, got {0}")]
    NonFinite(f64),
    #[error("media locator must be non-empty")]
    EmptyLocator,
    #[error("list elements must share one type, found {first} and {other}")]
    HeterogeneousList { first: &'static str, other: &'static str },
    #[error("invalid field name {0:?}")]
    BadFieldName(String),
}

/// A typed field value. Numbers are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireValue", into = "WireValue")]
pub enum FieldValue {
    Text(String),
    Number(f64),
    Bool(bool),
    Media(MediaRef),
    List(Vec<FieldValue>),
}

impl FieldValue {
    pub fn text(s: impl Into<String>) -> Self {
        FieldValue::Text(s.into())
    }

    pub fn number(x: f64) -> Result<Self, ValueError> {
        if x.is_finite() {
            Ok(FieldValue::Number(x))
        } else {
            Err(ValueError::NonFinite(x))
        }
    }

    pub fn media(kind: MediaKind, locator: impl Into<String>) -> Result<Self, ValueError> {
        let locator = locator.into();
        if locator.is_empty() {
            return Err(ValueError::EmptyLocator);
        }
        Ok(FieldValue::Media(MediaRef { kind, locator }))
    }

    pub fn list(values: Vec<FieldValue>) -> Result<Self, ValueError> {
        if let Some(first) = values.first() {
            let t = first.type_name();
            if let Some(other) = values.iter().map(FieldValue::type_name).find(|o| *o != t) {
                return Err(ValueError::HeterogeneousList { first: t, other });
            }
        }
        Ok(FieldValue::List(values))
    }

    /// Schema-level type name (`text`, `number`, `boolean`, `image`, `audio`, `list`).
    pub fn type_name(&self) -> &'static str {
        match self {
            FieldValue::Text(_) => "text",
            FieldValue::Number(_) => "number",
            FieldValue::Bool(_) => "boolean",
            FieldValue::Media(m) => m.kind.as_str(),
            FieldValue::List(_) => "list",
        }
    }

    pub fn schema_type(&self) -> SchemaType {
        match self {
            FieldValue::Text(_) => SchemaType::Text,
            FieldValue::Number(_) => SchemaType::Number,
            FieldValue::Bool(_) => SchemaType::Boolean,
            FieldValue::Media(m) => match m.kind {
                MediaKind::Image => SchemaType::Image,
                MediaKind::Audio => SchemaType::Audio,
            },
            FieldValue::List(_) => SchemaType::List,
        }
    }
}

/// Canonical text form used for logging, prompts and similarity scoring.
pub fn canonical_string(v: &FieldValue) -> String {
    match v {
        FieldValue::Text(s) => s.clone(),
        FieldValue::Number(x) => format_number(*x),
        FieldValue::Bool(b) => b.to_string(),
        FieldValue::Media(m) => m.locator.clone(),
        FieldValue::List(vs) => vs.iter().map(canonical_string).collect::<Vec<_>>().join(", "),
    }
}

/// Shortest round-trip decimal; `-0` prints as `0`.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x}")
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
enum WireValue {
    Text(String),
    Number(f64),
    Boolean(bool),
    Image(String),
    Audio(String),
    List(Vec<FieldValue>),
}

impl TryFrom<WireValue> for FieldValue {
    type Error = ValueError;

    fn try_from(w: WireValue) -> Result<Self, Self::Error> {
        match w {
            WireValue::Text(s) => Ok(FieldValue::Text(s)),
            WireValue::Number(x) => FieldValue::number(x),
            WireValue::Boolean(b) => Ok(FieldValue::Bool(b)),
            WireValue::Image(l) => FieldValue::media(MediaKind::Image, l),
            WireValue::Audio(l) => FieldValue::media(MediaKind::Audio, l),
            WireValue::List(vs) => FieldValue::list(vs),
        }
    }
}

impl From<FieldValue> for WireValue {
    fn from(v: FieldValue) -> Self {
        match v {
            FieldValue::Text(s) => WireValue::Text(s),
            FieldValue::Number(x) => WireValue::Number(x),
            FieldValue::Bool(b) => WireValue::Boolean(b),
            FieldValue::Media(MediaRef { kind: MediaKind::Image, locator }) => WireValue::Image(locator),
            FieldValue::Media(MediaRef { kind: MediaKind::Audio, locator }) => WireValue::Audio(locator),
            FieldValue::List(vs) => WireValue::List(vs),
        }
    }
}

pub type Fields = IndexMap<String, FieldValue>;

fn check_field_names(fields: &Fields) -> Result<(), ValueError> {
    match fields.keys().find(|k| !is_identifier(k)) {
        Some(bad) => Err(ValueError::BadFieldName(bad.clone())),
        None => Ok(()),
    }
}

/// One timestamped record flowing through a stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "WireItem")]
pub struct StreamItem {
    pub tick: u64,
    pub fields: Fields,
}

#[derive(Deserialize)]
struct WireItem {
    tick: u64,
    fields: Fields,
}

impl TryFrom<WireItem> for StreamItem {
    type Error = ValueError;

    fn try_from(w: WireItem) -> Result<Self, Self::Error> {
        check_field_names(&w.fields)?;
        Ok(StreamItem { tick: w.tick, fields: w.fields })
    }
}

impl StreamItem {
    pub fn new(tick: u64) -> Self {
        StreamItem { tick, fields: Fields::new() }
    }

    /// Builder-style insert. Panics on an invalid field name.
    pub fn with(mut self, name: &str, value: FieldValue) -> Self {
        assert!(is_identifier(name), "invalid field name {name:?}");
        self.fields.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&FieldValue> {
        self.fields.get(name)
    }

    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("stream items always serialize")
    }

    pub fn from_jsonl(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// A closed batch of items together with summary fields added downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedItem {
    pub tick: u64,
    pub window: (u64, u64),
    pub items: Vec<StreamItem>,
    pub fields: Fields,
}

impl BatchedItem {
    /// Builds a batch; the record tick is the last member's tick.
    pub fn new(items: Vec<StreamItem>, window: (u64, u64)) -> Self {
        debug_assert!(!items.is_empty());
        let tick = items.last().map(|i| i.tick).unwrap_or(window.1);
        BatchedItem { tick, window, items, fields: Fields::new() }
    }
}

/// The unit carried by a stream: either a plain item or a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireRecord", into = "WireRecord")]
pub enum Record {
    Item(StreamItem),
    Batch(BatchedItem),
}

/// Synthetic field under which batch members are exposed to scoring and schema checks.
pub const BATCH_ITEMS_FIELD: &str = "batch_items";

impl Record {
    pub fn tick(&self) -> u64 {
        match self {
            Record::Item(i) => i.tick,
            Record::Batch(b) => b.tick,
        }
    }

    pub fn fields(&self) -> &Fields {
        match self {
            Record::Item(i) => &i.fields,
            Record::Batch(b) => &b.fields,
        }
    }

    pub fn fields_mut(&mut self) -> &mut Fields {
        match self {
            Record::Item(i) => &mut i.fields,
            Record::Batch(b) => &mut b.fields,
        }
    }

    pub fn is_batch(&self) -> bool {
        matches!(self, Record::Batch(_))
    }

    /// Flat field view: batches contribute their members as a list of
    /// `name=value; ...` texts under [`BATCH_ITEMS_FIELD`].
    pub fn comparable_fields(&self) -> Fields {
        match self {
            Record::Item(i) => i.fields.clone(),
            Record::Batch(b) => {
                let mut out = b.fields.clone();
                let members = b.items.iter().map(|i| FieldValue::Text(item_summary(i))).collect();
                out.insert(BATCH_ITEMS_FIELD.to_string(), FieldValue::List(members));
                out
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

fn item_summary(item: &StreamItem) -> String {
    item.fields
        .iter()
        .map(|(k, v)| format!("{k}={}", canonical_string(v)))
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<StreamItem> for Record {
    fn from(i: StreamItem) -> Self {
        Record::Item(i)
    }
}

#[derive(Serialize, Deserialize)]
struct WireBatch {
    window: (u64, u64),
    items: Vec<StreamItem>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    tick: u64,
    fields: Fields,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batch: Option<WireBatch>,
}

impl TryFrom<WireRecord> for Record {
    type Error = ValueError;

    fn try_from(w: WireRecord) -> Result<Self, Self::Error> {
        check_field_names(&w.fields)?;
        Ok(match w.batch {
            None => Record::Item(StreamItem { tick: w.tick, fields: w.fields }),
            Some(b) => Record::Batch(BatchedItem { tick: w.tick, window: b.window, items: b.items, fields: w.fields }),
        })
    }
}

impl From<Record> for WireRecord {
    fn from(r: Record) -> Self {
        match r {
            Record::Item(i) => WireRecord { tick: i.tick, fields: i.fields, batch: None },
            Record::Batch(b) => WireRecord {
                tick: b.tick,
                fields: b.fields,
                batch: Some(WireBatch { window: b.window, items: b.items }),
            },
        }
    }
}

/// Declared field types of a stream schema. Unrecognized names are kept so
/// that validation can report them instead of failing deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum SchemaType {
    Text,
    Number,
    Boolean,
    Image,
    Audio,
    List,
    Unknown(String),
}

impl SchemaType {
    pub fn as_str(&self) -> &str {
        match self {
            SchemaType::Text => "text",
            SchemaType::Number => "number",
            SchemaType::Boolean => "boolean",
            SchemaType::Image => "image",
            SchemaType::Audio => "audio",
            SchemaType::List => "list",
            SchemaType::Unknown(s) => s,
        }
    }
}

impl From<String> for SchemaType {
    fn from(s: String) -> Self {
        match s.as_str() {
            "text" => SchemaType::Text,
            "number" => SchemaType::Number,
            "boolean" => SchemaType::Boolean,
            "image" => SchemaType::Image,
            "audio" => SchemaType::Audio,
            "list" => SchemaType::List,
            _ => SchemaType::Unknown(s),
        }
    }
}

impl From<SchemaType> for String {
    fn from(t: SchemaType) -> Self {
        t.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(rename = "type")]
    pub field_type: SchemaType,
    #[serde(default)]
    pub meaning: String,
}

/// Three-part stream contract: id, prose description and field schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescription {
    pub stream_id: String,
    pub description: String,
    pub fields_schema: IndexMap<String, FieldSpec>,
}

impl StreamDescription {
    pub fn new(stream_id: &str, description: &str) -> Self {
        StreamDescription {
            stream_id: stream_id.to_string(),
            description: description.to_string(),
            fields_schema: IndexMap::new(),
        }
    }

    pub fn field(mut self, name: &str, field_type: SchemaType, meaning: &str) -> Self {
        self.fields_schema
            .insert(name.to_string(), FieldSpec { field_type, meaning: meaning.to_string() });
        self
    }
}

/// Machine-readable diagnostic codes shared by the validators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Code {
    BadId,
    EmptySchema,
    BadSchemaType,
    BadFieldName,
    ParseError,
    UnknownKind,
    DuplicateNodeId,
    MultipleBatchModes,
    MissingBatchMode,
    BadBatchParam,
    MissingParam,
    ExprSyntax,
    TemplateSyntax,
    UnknownStream,
    UnknownBuffer,
    UnknownField,
    Cycle,
    BadSignature,
    UnsupportedSignature,
    NonBooleanPredicate,
    BatchScope,
    SchemaConflict,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::BadId => "BAD_ID",
            Code::EmptySchema => "EMPTY_SCHEMA",
            Code::BadSchemaType => "BAD_SCHEMA_TYPE",
            Code::BadFieldName => "BAD_FIELD_NAME",
            Code::ParseError => "PARSE_ERROR",
            Code::UnknownKind => "UNKNOWN_KIND",
            Code::DuplicateNodeId => "DUPLICATE_NODE_ID",
            Code::MultipleBatchModes => "MULTIPLE_BATCH_MODES",
            Code::MissingBatchMode => "MISSING_BATCH_MODE",
            Code::BadBatchParam => "BAD_BATCH_PARAM",
            Code::MissingParam => "MISSING_PARAM",
            Code::ExprSyntax => "EXPR_SYNTAX",
            Code::TemplateSyntax => "TEMPLATE_SYNTAX",
            Code::UnknownStream => "UNKNOWN_STREAM",
            Code::UnknownBuffer => "UNKNOWN_BUFFER",
            Code::UnknownField => "UNKNOWN_FIELD",
            Code::Cycle => "CYCLE",
            Code::BadSignature => "BAD_SIGNATURE",
            Code::UnsupportedSignature => "UNSUPPORTED_SIGNATURE",
            Code::NonBooleanPredicate => "NON_BOOLEAN_PREDICATE",
            Code::BatchScope => "BATCH_SCOPE",
            Code::SchemaConflict => "SCHEMA_CONFLICT",
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: Code,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl Diagnostic {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Diagnostic { code, message: message.into(), node_id: None, line: None, column: None }
    }

    pub fn at_node(mut self, node_id: &str) -> Self {
        self.node_id = Some(node_id.to_string());
        self
    }

    pub fn at(mut self, line: usize, column: usize) -> Self {
        self.line = Some(line);
        self.column = Some(column);
        self
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.code)?;
        if let Some(n) = &self.node_id {
            write!(f, " node {n}")?;
        }
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, " at {l}:{c}")?;
        }
        write!(f, ": {}", self.message)
    }
}

pub fn validate_description(desc: &StreamDescription) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !is_identifier(&desc.stream_id) {
        out.push(Diagnostic::new(
            Code::BadId,
            format!("stream id {:?} must match [a-z][a-z0-9_]*", desc.stream_id),
        ));
    }
    if desc.fields_schema.is_empty() {
        out.push(Diagnostic::new(Code::EmptySchema, format!("stream {} declares no fields", desc.stream_id)));
    }
    for (name, fs) in &desc.fields_schema {
        if !is_identifier(name) {
            out.push(Diagnostic::new(Code::BadFieldName, format!("field name {name:?} must match [a-z][a-z0-9_]*")));
        }
        if let SchemaType::Unknown(t) = &fs.field_type {
            out.push(Diagnostic::new(Code::BadSchemaType, format!("field {name} has unknown type {t:?}")));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BufferError {
    #[error("EMPTY_BUFFER: pop on empty buffer {0}")]
    EmptyBuffer(String),
    #[error("INDEX_OUT_OF_RANGE: index {index} on buffer {name} of length {len}")]
    IndexOutOfRange { name: String, index: usize, len: usize },
}

impl BufferError {
    pub fn code(&self) -> &'static str {
        match self {
            BufferError::EmptyBuffer(_) => "EMPTY_BUFFER",
            BufferError::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferTake {
    Pop,
    PopAll,
    Get(usize),
    GetAll,
}

/// Default bound applied to buffers declared without a capacity.
pub const DEFAULT_BUFFER_CAPACITY: usize = 65_536;

/// Named FIFO. When full, appending evicts the oldest item.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    name: String,
    capacity: Option<usize>,
    contents: VecDeque<StreamItem>,
    evicted: u64,
}

impl Buffer {
    pub fn new(name: impl Into<String>, capacity: Option<usize>) -> Self {
        Buffer { name: name.into(), capacity, contents: VecDeque::new(), evicted: 0 }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    pub fn evicted_count(&self) -> u64 {
        self.evicted
    }

    /// Appends at the tail, returning the evicted head when over capacity.
    pub fn append(&mut self, item: StreamItem) -> Option<StreamItem> {
        self.contents.push_back(item);
        match self.capacity {
            Some(cap) if self.contents.len() > cap => {
                self.evicted += 1;
                let old = self.contents.pop_front();
                log::warn!("buffer {} over capacity {cap}; evicted oldest item", self.name);
                old
            }
            _ => None,
        }
    }

    pub fn take(&mut self, mode: BufferTake) -> Result<Vec<StreamItem>, BufferError> {
        match mode {
            BufferTake::Pop => self.pop().map(|i| vec![i]),
            BufferTake::PopAll => Ok(self.pop_all()),
            BufferTake::Get(i) => self.get(i).cloned().map(|x| vec![x]),
            BufferTake::GetAll => Ok(self.get_all()),
        }
    }

    pub fn pop(&mut self) -> Result<StreamItem, BufferError> {
        self.contents.pop_front().ok_or_else(|| BufferError::EmptyBuffer(self.name.clone()))
    }

    pub fn pop_all(&mut self) -> Vec<StreamItem> {
        self.contents.drain(..).collect()
    }

    pub fn get(&self, index: usize) -> Result<&StreamItem, BufferError> {
        self.contents.get(index).ok_or_else(|| BufferError::IndexOutOfRange {
            name: self.name.clone(),
            index,
            len: self.contents.len(),
        })
    }

    pub fn get_all(&self) -> Vec<StreamItem> {
        self.contents.iter().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StreamItem> {
        self.contents.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(n: f64) -> StreamItem {
        StreamItem::new(0).with("v", FieldValue::Number(n))
    }

    #[test]
    fn description_diagnostics() {
        let ok = StreamDescription::new("all_news", "news headlines").field("headline", SchemaType::Text, "title");
        assert!(validate_description(&ok).is_empty());

        let bad = StreamDescription::new("3bad", "x").field("a", SchemaType::Text, "");
        let d = validate_description(&bad);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].code, Code::BadId);

        let empty = StreamDescription::new("ok", "x");
        assert_eq!(validate_description(&empty)[0].code, Code::EmptySchema);

        let json = r#"{"stream_id":"s","description":"d","fields_schema":{"a":{"type":"video","meaning":""}}}"#;
        let weird: StreamDescription = serde_json::from_str(json).unwrap();
        assert_eq!(validate_description(&weird)[0].code, Code::BadSchemaType);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonical_string(&FieldValue::Number(2.0)), "2");
        assert_eq!(canonical_string(&FieldValue::text("Walk")), "Walk");
        let l = FieldValue::list(vec![FieldValue::Number(1.0), FieldValue::Number(2.5)]).unwrap();
        assert_eq!(canonical_string(&l), "1, 2.5");
        assert_eq!(canonical_string(&FieldValue::Bool(false)), "false");
        assert_eq!(canonical_string(&FieldValue::media(MediaKind::Image, "cam/1.png").unwrap()), "cam/1.png");
        assert_eq!(canonical_string(&FieldValue::Number(-0.0)), "0");
        assert_eq!(canonical_string(&FieldValue::Number(0.1 + 0.2)), "0.30000000000000004");
    }

    #[test]
    fn canonical_string_is_pure() {
        let v = FieldValue::list(vec![FieldValue::Number(1.0 / 3.0), FieldValue::Number(7.25)]).unwrap();
        let first = canonical_string(&v);
        assert!((0..1000).all(|_| canonical_string(&v) == first));
    }

    #[test]
    fn value_invariants() {
        assert!(FieldValue::number(f64::NAN).is_err());
        assert!(FieldValue::number(f64::INFINITY).is_err());
        assert!(FieldValue::media(MediaKind::Audio, "").is_err());
        assert!(FieldValue::list(vec![FieldValue::Number(1.0), FieldValue::text("a")]).is_err());
        // NaN cannot sneak in through the wire either.
        assert!(serde_json::from_str::<FieldValue>(r#"{"type":"image","value":""}"#).is_err());
        assert!(serde_json::from_str::<StreamItem>(r#"{"tick":0,"fields":{"Bad":{"type":"text","value":"x"}}}"#).is_err());
    }

    #[test]
    fn wire_format() {
        let it = StreamItem::new(3)
            .with("loudness", FieldValue::Number(80.0))
            .with("img", FieldValue::media(MediaKind::Image, "cam/1.png").unwrap());
        assert_eq!(
            it.to_jsonl(),
            r#"{"tick":3,"fields":{"loudness":{"type":"number","value":80.0},"img":{"type":"image","value":"cam/1.png"}}}"#
        );
    }

    #[test]
    fn buffer_append_and_evict() {
        let mut b = Buffer::new("b", None);
        assert_eq!(b.append(item(1.0)), None);
        b.append(item(2.0));
        assert_eq!(b.get_all(), vec![item(1.0), item(2.0)]);

        let mut c = Buffer::new("c", Some(2));
        c.append(item(1.0));
        c.append(item(2.0));
        assert_eq!(c.append(item(3.0)), Some(item(1.0)));
        assert_eq!(c.get_all(), vec![item(2.0), item(3.0)]);
        assert_eq!(c.evicted_count(), 1);
    }

    #[test]
    fn buffer_take_modes() {
        let mut b = Buffer::new("b", None);
        b.append(item(1.0));
        b.append(item(2.0));
        assert_eq!(b.take(BufferTake::Get(0)).unwrap(), vec![item(1.0)]);
        assert_eq!(b.len(), 2);
        assert_eq!(b.take(BufferTake::Get(5)).unwrap_err().code(), "INDEX_OUT_OF_RANGE");
        assert_eq!(b.take(BufferTake::GetAll).unwrap().len(), 2);
        assert_eq!(b.take(BufferTake::PopAll).unwrap(), vec![item(1.0), item(2.0)]);
        assert!(b.is_empty());
        assert_eq!(b.take(BufferTake::Pop).unwrap_err().code(), "EMPTY_BUFFER");
    }

    fn name() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,8}"
    }

    fn leaf() -> impl Strategy<Value = FieldValue> {
        prop_oneof![
            ".{0,12}".prop_map(FieldValue::Text),
            (-1e12f64..1e12).prop_map(FieldValue::Number),
            any::<bool>().prop_map(FieldValue::Bool),
            "[a-z/._0-9]{1,12}".prop_map(|l| FieldValue::media(MediaKind::Image, l).unwrap()),
        ]
    }

    fn value() -> impl Strategy<Value = FieldValue> {
        prop_oneof![
            3 => leaf(),
            1 => prop::collection::vec((-1e6f64..1e6).prop_map(FieldValue::Number), 0..4).prop_map(FieldValue::List),
        ]
    }

    proptest! {
        #[test]
        fn item_roundtrip(tick in 0u64..1_000_000, fields in prop::collection::vec((name(), value()), 0..6)) {
            let mut it = StreamItem::new(tick);
            for (k, v) in fields {
                it.fields.insert(k, v);
            }
            let back = StreamItem::from_jsonl(&it.to_jsonl()).unwrap();
            prop_assert_eq!(back, it);
        }

        #[test]
        fn fifo_law(values in prop::collection::vec(-1e6f64..1e6, 0..50)) {
            let mut b = Buffer::new("b", None);
            for v in &values {
                b.append(item(*v));
            }
            let out: Vec<f64> = b.pop_all().iter().map(|i| match i.get("v") { Some(FieldValue::Number(x)) => *x, _ => f64::NAN }).collect();
            prop_assert_eq!(out, values);
        }
    }
}
