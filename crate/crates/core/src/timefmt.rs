//! Timestamps are "YYYY-MM-DD HH:MM:SS", read as UTC.

use chrono::NaiveDateTime;

pub const FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn parse(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), FORMAT).ok()
}

pub fn format(t: &NaiveDateTime) -> String {
    t.format(FORMAT).to_string()
}

/// Serde adapter for `#[serde(with = "crate::timefmt")]`.
pub fn serialize<S: serde::Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format(t))
}

pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
    let raw: std::borrow::Cow<'de, str> = serde::Deserialize::deserialize(d)?;
    parse(&raw).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp `{raw}`")))
}
