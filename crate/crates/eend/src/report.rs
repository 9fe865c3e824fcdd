//! DER report as an aligned text table and as JSON.

use eend_core::score::DerReport;
use serde::Serialize;

/// Percentages except `scored_time`, which is seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerJson {
    pub der: f64,
    pub mi: f64,
    pub fa: f64,
    pub cf: f64,
    pub sad_mi: f64,
    pub sad_fa: f64,
    pub scored_time: f64,
}

impl From<&DerReport> for DerJson {
    fn from(r: &DerReport) -> Self {
        DerJson {
            der: r.der,
            mi: r.miss,
            fa: r.false_alarm,
            cf: r.confusion,
            sad_mi: r.sad_miss,
            sad_fa: r.sad_fa,
            scored_time: r.scored_time,
        }
    }
}

pub fn to_json(r: &DerReport) -> String {
    serde_json::to_string_pretty(&DerJson::from(r)).expect("report serializes") + "\n"
}

pub fn to_table(r: &DerReport) -> String {
    let rows = [
        ("DER", r.der),
        ("MI", r.miss),
        ("FA", r.false_alarm),
        ("CF", r.confusion),
        ("SAD MI", r.sad_miss),
        ("SAD FA", r.sad_fa),
    ];
    let mut s = String::new();
    for (name, v) in rows {
        s.push_str(&format!("{name:<8}{v:>8.2} %\n"));
    }
    s.push_str(&format!("{:<8}{:>8.2} s\n", "scored", r.scored_time));
    s
}
