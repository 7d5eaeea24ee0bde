//! Datex-II-style warning messages padded to an exact byte size.
//!
//! The body is a well-formed XML document carrying one `situationRecord`, a
//! signature block of fixed size and a padding element that absorbs the gap
//! between the envelope and the size class target.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bytes in a [`SizeClass::Small`] message body.
pub const SMALL_MESSAGE_BYTES: usize = 5_600;
/// Bytes in a [`SizeClass::Large`] message body.
pub const LARGE_MESSAGE_BYTES: usize = 51_200;

const SIGNATURE_VALUE_BYTES: usize = 256;
const CERTIFICATE_BYTES: usize = 936;
const FILLER: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Error, PartialEq)]
pub enum MessageError {
    #[error("event_id must not be empty")]
    EmptyEventId,
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("envelope of {envelope} bytes does not fit in {target} bytes")]
    SizeInfeasible { envelope: usize, target: usize },
    #[error("malformed message body: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    #[default]
    Small,
    Large,
}

impl SizeClass {
    pub const fn bytes(self) -> usize {
        match self {
            SizeClass::Small => SMALL_MESSAGE_BYTES,
            SizeClass::Large => LARGE_MESSAGE_BYTES,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SizeClass::Small),
            "large" => Ok(SizeClass::Large),
            other => Err(format!("unknown size class `{other}` (expected small or large)")),
        }
    }
}

/// Datex II situation record types a warning can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventType {
    VehicleObstruction,
    AnimalPresenceObstruction,
    GeneralObstruction,
    Accident,
    PoorEnvironmentConditions,
}

impl EventType {
    pub const fn as_str(self) -> &'static str {
        match self {
            EventType::VehicleObstruction => "VehicleObstruction",
            EventType::AnimalPresenceObstruction => "AnimalPresenceObstruction",
            EventType::GeneralObstruction => "GeneralObstruction",
            EventType::Accident => "Accident",
            EventType::PoorEnvironmentConditions => "PoorEnvironmentConditions",
        }
    }
}

impl FromStr for EventType {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "VehicleObstruction" => EventType::VehicleObstruction,
            "AnimalPresenceObstruction" => EventType::AnimalPresenceObstruction,
            "GeneralObstruction" => EventType::GeneralObstruction,
            "Accident" => EventType::Accident,
            "PoorEnvironmentConditions" => EventType::PoorEnvironmentConditions,
            other => return Err(MessageError::Malformed(format!("unknown record type `{other}`"))),
        })
    }
}

/// The sensor reading that triggers an upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningEvent {
    pub event_id: String,
    pub event_type: EventType,
    pub timestamp: DateTime<Utc>,
    pub latitude: f64,
    pub longitude: f64,
}

impl WarningEvent {
    /// Builds a validated event; the timestamp is truncated to milliseconds.
    pub fn new(
        event_id: impl Into<String>,
        event_type: EventType,
        timestamp: DateTime<Utc>,
        latitude: f64,
        longitude: f64,
    ) -> Result<Self, MessageError> {
        let event = Self {
            event_id: event_id.into(),
            event_type,
            timestamp: timestamp.trunc_subsecs(3),
            latitude,
            longitude,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if self.event_id.is_empty() {
            return Err(MessageError::EmptyEventId);
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(MessageError::Latitude(self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(MessageError::Longitude(self.longitude));
        }
        Ok(())
    }
}

/// A serialized warning whose body length equals its declared size.
#[derive(Debug, Clone, PartialEq)]
pub struct WarningMessage {
    body: Vec<u8>,
    size_class: SizeClass,
    event: WarningEvent,
}

impl WarningMessage {
    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn declared_size(&self) -> usize {
        self.size_class.bytes()
    }

    pub fn size_class(&self) -> SizeClass {
        self.size_class
    }

    pub fn event(&self) -> &WarningEvent {
        &self.event
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }
}

/// Serializes `event` into a document of exactly `size_class.bytes()` bytes.
pub fn build_warning_message(
    event: &WarningEvent,
    size_class: SizeClass,
) -> Result<WarningMessage, MessageError> {
    build_with_target(event, size_class, size_class.bytes())
}

fn build_with_target(
    event: &WarningEvent,
    size_class: SizeClass,
    target: usize,
) -> Result<WarningMessage, MessageError> {
    event.validate()?;

    let situation = situation_xml(event);
    let signature = signature_xml(situation.as_bytes());

    let head = format!(
        concat!(
            r#"<?xml version="1.0" encoding="UTF-8"?>"#,
            "\n",
            r#"<d2LogicalModel xmlns="http://datex2.eu/schema/2/2_0" "#,
            r#"xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance" modelBaseVersion="2">"#,
            "\n",
            "<exchange><supplierIdentification><country>se</country>",
            "<nationalIdentifier>mabench</nationalIdentifier></supplierIdentification></exchange>\n",
            "{situation}{signature}<padding>"
        ),
        situation = situation,
        signature = signature,
    );
    let tail = "</padding>\n</d2LogicalModel>\n";

    let envelope = head.len() + tail.len();
    if envelope > target {
        return Err(MessageError::SizeInfeasible { envelope, target });
    }

    let mut body = Vec::with_capacity(target);
    body.extend_from_slice(head.as_bytes());
    body.extend(FILLER.iter().copied().cycle().take(target - envelope));
    body.extend_from_slice(tail.as_bytes());
    debug_assert_eq!(body.len(), target);

    Ok(WarningMessage { body, size_class, event: event.clone() })
}

fn situation_xml(event: &WarningEvent) -> String {
    let id = escape(event.event_id.as_str());
    let ts = event.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true);
    format!(
        concat!(
            r#"<payloadPublication xsi:type="SituationPublication" lang="en">"#,
            "<publicationTime>{ts}</publicationTime>",
            r#"<situation id="{id}"><situationRecord xsi:type="{kind}" id="{id}-r1" version="1">"#,
            "<situationRecordCreationTime>{ts}</situationRecordCreationTime>",
            "<eventId>{id}</eventId>",
            "<probabilityOfOccurrence>certain</probabilityOfOccurrence>",
            r#"<groupOfLocations xsi:type="Point"><pointByCoordinates><pointCoordinates>"#,
            "<latitude>{lat}</latitude><longitude>{lon}</longitude>",
            "</pointCoordinates></pointByCoordinates></groupOfLocations>",
            "</situationRecord></situation></payloadPublication>\n"
        ),
        ts = ts,
        id = id,
        kind = event.event_type.as_str(),
        lat = event.latitude,
        lon = event.longitude,
    )
}

/// Fixed-size stand-in for an XMLDSig block: digest of the situation, a
/// digest-derived signature value and a constant certificate blob.
fn signature_xml(signed: &[u8]) -> String {
    let digest = Sha256::digest(signed);
    let signature_value = expand(&digest, SIGNATURE_VALUE_BYTES);
    let certificate = expand(b"mabench stand-in X.509 certificate", CERTIFICATE_BYTES);
    format!(
        concat!(
            r#"<signature algorithm="rsa-sha256">"#,
            "<digestValue>{}</digestValue>",
            "<signatureValue>{}</signatureValue>",
            "<certificate>{}</certificate>",
            "</signature>\n"
        ),
        BASE64.encode(digest),
        BASE64.encode(signature_value),
        BASE64.encode(certificate),
    )
}

fn expand(seed: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut counter = 0u32;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(counter.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(len);
    out
}

/// Fields recovered from a message body.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedWarning {
    pub event: WarningEvent,
    pub digest: String,
    pub has_signature: bool,
    pub padding_len: usize,
}

/// Parses a body produced by [`build_warning_message`], checking that the
/// document is well-formed along the way.
pub fn parse_warning_message(body: &[u8]) -> Result<ParsedWarning, MessageError> {
    let malformed = |e: &dyn fmt::Display| MessageError::Malformed(e.to_string());
    let mut reader = Reader::from_reader(body);
    reader.config_mut().check_end_names = true;

    let mut buf = Vec::new();
    let mut path: Vec<String> = Vec::new();
    let mut event_id = None;
    let mut event_type = None;
    let mut timestamp = None;
    let mut latitude = None;
    let mut longitude = None;
    let mut digest = None;
    let mut has_signature = false;
    let mut has_record = false;
    let mut padding_len = 0;

    loop {
        match reader.read_event_into(&mut buf).map_err(|e| malformed(&e))? {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if name == "situationRecord" {
                    has_record = true;
                    for attr in e.attributes() {
                        let attr = attr.map_err(|e| malformed(&e))?;
                        if attr.key.as_ref() == b"xsi:type" {
                            let v = attr.unescape_value().map_err(|e| malformed(&e))?;
                            event_type = Some(v.parse::<EventType>()?);
                        }
                    }
                }
                if name == "signature" {
                    has_signature = true;
                }
                path.push(name);
            }
            Event::End(_) => {
                path.pop();
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|e| malformed(&e))?;
                match path.last().map(String::as_str) {
                    Some("eventId") => event_id = Some(text.into_owned()),
                    Some("situationRecordCreationTime") => {
                        let ts = DateTime::parse_from_rfc3339(&text).map_err(|e| malformed(&e))?;
                        timestamp = Some(ts.with_timezone(&Utc));
                    }
                    Some("latitude") => latitude = Some(text.parse::<f64>().map_err(|e| malformed(&e))?),
                    Some("longitude") => longitude = Some(text.parse::<f64>().map_err(|e| malformed(&e))?),
                    Some("digestValue") => digest = Some(text.into_owned()),
                    Some("padding") => padding_len = text.len(),
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !path.is_empty() {
        return Err(MessageError::Malformed(format!("unclosed element `{}`", path.join("/"))));
    }
    if !has_record {
        return Err(MessageError::Malformed("missing situationRecord".into()));
    }
    let missing = |what: &str| MessageError::Malformed(format!("missing {what}"));
    let event = WarningEvent {
        event_id: event_id.ok_or_else(|| missing("eventId"))?,
        event_type: event_type.ok_or_else(|| missing("record type"))?,
        timestamp: timestamp.ok_or_else(|| missing("timestamp"))?,
        latitude: latitude.ok_or_else(|| missing("latitude"))?,
        longitude: longitude.ok_or_else(|| missing("longitude"))?,
    };
    Ok(ParsedWarning {
        event,
        digest: digest.ok_or_else(|| missing("digestValue"))?,
        has_signature,
        padding_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn event() -> WarningEvent {
        let ts = Utc.with_ymd_and_hms(2018, 5, 14, 9, 30, 10).unwrap();
        WarningEvent::new("KS-0001", EventType::VehicleObstruction, ts, 59.3793, 13.5036).unwrap()
    }

    #[test]
    fn small_and_large_sizes_are_exact() {
        let small = build_warning_message(&event(), SizeClass::Small).unwrap();
        assert_eq!(small.body().len(), 5600);
        assert_eq!(small.declared_size(), 5600);
        let large = build_warning_message(&event(), SizeClass::Large).unwrap();
        assert_eq!(large.body().len(), 51_200);
    }

    #[test]
    fn deterministic_bodies() {
        let a = build_warning_message(&event(), SizeClass::Small).unwrap();
        let b = build_warning_message(&event(), SizeClass::Small).unwrap();
        assert_eq!(a.body(), b.body());
    }

    #[test]
    fn body_is_well_formed_and_round_trips() {
        let msg = build_warning_message(&event(), SizeClass::Small).unwrap();
        let parsed = parse_warning_message(msg.body()).unwrap();
        assert_eq!(parsed.event, event());
        assert!(parsed.has_signature);
        assert!(parsed.padding_len > 0);
        let text = std::str::from_utf8(msg.body()).unwrap();
        assert!(text.contains(r#"xsi:type="VehicleObstruction""#));
        assert!(text.contains("<latitude>59.3793</latitude>"));
    }

    #[test]
    fn invalid_events_are_rejected() {
        let mut e = event();
        e.latitude = 91.0;
        assert_eq!(build_warning_message(&e, SizeClass::Small), Err(MessageError::Latitude(91.0)));
        let mut e = event();
        e.longitude = -180.5;
        assert!(matches!(build_warning_message(&e, SizeClass::Small), Err(MessageError::Longitude(_))));
        let mut e = event();
        e.event_id.clear();
        assert_eq!(build_warning_message(&e, SizeClass::Small), Err(MessageError::EmptyEventId));
    }

    #[test]
    fn oversized_envelope_is_infeasible() {
        let err = build_with_target(&event(), SizeClass::Small, 1000).unwrap_err();
        assert!(matches!(err, MessageError::SizeInfeasible { target: 1000, .. }));
        let mut e = event();
        e.event_id = "x".repeat(6000);
        assert!(matches!(
            build_warning_message(&e, SizeClass::Small),
            Err(MessageError::SizeInfeasible { .. })
        ));
    }

    #[test]
    fn markup_in_identifiers_is_escaped() {
        let mut e = event();
        e.event_id = "a<b>&\"c'".into();
        let msg = build_warning_message(&e, SizeClass::Small).unwrap();
        assert_eq!(msg.len(), 5600);
        assert_eq!(parse_warning_message(msg.body()).unwrap().event.event_id, e.event_id);
    }

    #[test]
    fn truncated_body_is_malformed() {
        let msg = build_warning_message(&event(), SizeClass::Small).unwrap();
        assert!(parse_warning_message(&msg.body()[..2000]).is_err());
    }

    proptest! {
        #[test]
        fn size_exact_and_fields_recovered(
            id in "[A-Za-z0-9_<>&-]{1,40}",
            lat in -90.0f64..=90.0,
            lon in -180.0f64..=180.0,
            millis in 0i64..4_000_000_000_000,
            large in any::<bool>(),
        ) {
            let ts = Utc.timestamp_millis_opt(millis).unwrap();
            let e = WarningEvent::new(id, EventType::Accident, ts, lat, lon).unwrap();
            let class = if large { SizeClass::Large } else { SizeClass::Small };
            let msg = build_warning_message(&e, class).unwrap();
            prop_assert_eq!(msg.body().len(), class.bytes());
            let parsed = parse_warning_message(msg.body()).unwrap();
            prop_assert_eq!(parsed.event, e);
        }
    }
}
