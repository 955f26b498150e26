//! The anatomy taxonomy: 5 body stations, 20 organs, modalities with MR
//! protocols, and slice orientations.
//!
//! The organ→station map is data, not code. A default ships embedded, but
//! every consumer (caption rendering, scene generation, evaluation) reads
//! the same parsed [`OrganStationMap`] so the mapping has a single source of
//! truth, and an alternate map file can be supplied without rebuilding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STATIONS: [&str; 5] = ["head", "chest", "abdomen", "pelvis", "lower body"];

pub const ORGANS: [&str; 20] = [
    "brain", "mandible", "neck", "shoulder", "humerus", "elbow", "forearm", "wrist", "hand",
    "lungs", "heart", "liver", "kidneys", "intestine", "pelvic bone", "thigh", "knee", "leg",
    "ankle", "foot",
];

pub const MR_PROTOCOLS: [&str; 6] = ["T1", "T2", "FLAIR", "DWI", "ADC", "STIR"];

pub const ORIENTATIONS: [&str; 3] = ["axial", "coronal", "sagittal"];

/// Embedded default organ→station assignment.
pub const DEFAULT_MAP_TEXT: &str = include_str!("assets/organ_station.map");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ct,
    Mr,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
        })
    }
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CT" => Ok(Modality::Ct),
            "MR" => Ok(Modality::Mr),
            other => Err(Error::Data(format!("unknown modality {other:?}"))),
        }
    }
}

/// Total map from each of the 20 organs to its one station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganStationMap {
    organ_to_station: BTreeMap<String, String>,
    station_to_organs: BTreeMap<String, Vec<String>>,
    hash: String,
}

impl OrganStationMap {
    /// Parse `station: organ, organ, ...` lines. The map must cover all 20
    /// organs exactly once using only the 5 canonical stations.
    pub fn parse(text: &str) -> Result<Self> {
        let mut organ_to_station = BTreeMap::new();
        let mut station_to_organs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (station, organs) = line.split_once(':').ok_or_else(|| {
                Error::Data(format!("organ map line {}: expected 'station: organs'", lineno + 1))
            })?;
            let station = station.trim();
            if !STATIONS.contains(&station) {
                return Err(Error::Data(format!(
                    "organ map line {}: unknown station {station:?}",
                    lineno + 1
                )));
            }
            for organ in organs.split(',') {
                let organ = organ.trim();
                if organ.is_empty() {
                    continue;
                }
                if !ORGANS.contains(&organ) {
                    return Err(Error::Data(format!(
                        "organ map line {}: unknown organ {organ:?}",
                        lineno + 1
                    )));
                }
                if organ_to_station.insert(organ.to_string(), station.to_string()).is_some() {
                    return Err(Error::Data(format!(
                        "organ map: organ {organ:?} assigned to more than one station"
                    )));
                }
                station_to_organs.entry(station.to_string()).or_default().push(organ.to_string());
            }
        }
        for organ in ORGANS {
            if !organ_to_station.contains_key(organ) {
                return Err(Error::Data(format!("organ map: organ {organ:?} has no station")));
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let hash = hex(&hasher.finalize());
        Ok(OrganStationMap { organ_to_station, station_to_organs, hash })
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP_TEXT).expect("embedded organ map is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn station_of(&self, organ: &str) -> Result<&str> {
        self.organ_to_station
            .get(organ)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Data(format!("unknown organ {organ:?}")))
    }

    pub fn organs_of(&self, station: &str) -> &[String] {
        self.station_to_organs.get(station).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Content hash of the map file, stamped into manifests and checkpoints.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Ground-truth labels for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub modality: Modality,
    /// MR protocol; present exactly when modality is MR.
    pub protocol: Option<String>,
    pub orientation: String,
    pub station: String,
    pub organs: Vec<String>,
}

impl LabelRecord {
    pub fn new(
        map: &OrganStationMap,
        modality: Modality,
        protocol: Option<String>,
        orientation: String,
        station: String,
        organs: Vec<String>,
    ) -> Result<Self> {
        let record = LabelRecord { modality, protocol, orientation, station, organs };
        record.validate(map)?;
        Ok(record)
    }

    pub fn validate(&self, map: &OrganStationMap) -> Result<()> {
        match (self.modality, &self.protocol) {
            (Modality::Mr, Some(p)) if MR_PROTOCOLS.contains(&p.as_str()) => {}
            (Modality::Mr, Some(p)) => {
                return Err(Error::Data(format!("unknown MR protocol {p:?}")));
            }
            (Modality::Mr, None) => {
                return Err(Error::Data("MR record is missing its protocol".into()));
            }
            (Modality::Ct, None) => {}
            (Modality::Ct, Some(_)) => {
                return Err(Error::Data("CT record must not carry a protocol".into()));
            }
        }
        if !ORIENTATIONS.contains(&self.orientation.as_str()) {
            return Err(Error::Data(format!("unknown orientation {:?}", self.orientation)));
        }
        if !STATIONS.contains(&self.station.as_str()) {
            return Err(Error::Data(format!("unknown station {:?}", self.station)));
        }
        if self.organs.is_empty() {
            return Err(Error::Data("record has no organs".into()));
        }
        for organ in &self.organs {
            let canonical = map.station_of(organ)?;
            if canonical != self.station {
                return Err(Error::Data(format!(
                    "organ {organ:?} belongs to station {canonical:?}, not {:?}",
                    self.station
                )));
            }
        }
        Ok(())
    }

    /// The modality phrase captions use: "CT" or "MR <protocol>".
    pub fn modality_phrase(&self) -> String {
        match &self.protocol {
            Some(p) => format!("{} {p}", self.modality),
            None => self.modality.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_is_total_over_20_organs() {
        let map = OrganStationMap::default_map();
        for organ in ORGANS {
            let station = map.station_of(organ).unwrap();
            assert!(STATIONS.contains(&station));
        }
    }

    #[test]
    fn stations_partition_the_organs() {
        let map = OrganStationMap::default_map();
        let total: usize = STATIONS.iter().map(|s| map.organs_of(s).len()).sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn expected_assignments_hold() {
        let map = OrganStationMap::default_map();
        assert_eq!(map.station_of("brain").unwrap(), "head");
        assert_eq!(map.station_of("knee").unwrap(), "lower body");
        assert_eq!(map.station_of("liver").unwrap(), "abdomen");
        assert_eq!(map.station_of("wrist").unwrap(), "pelvis");
        assert_eq!(map.station_of("heart").unwrap(), "chest");
    }

    #[test]
    fn duplicate_assignment_rejected() {
        let text = "head: brain\nchest: brain";
        assert!(matches!(OrganStationMap::parse(text), Err(Error::Data(_))));
    }

    #[test]
    fn incomplete_map_rejected() {
        assert!(matches!(OrganStationMap::parse("head: brain"), Err(Error::Data(_))));
    }

    #[test]
    fn cross_station_record_rejected() {
        let map = OrganStationMap::default_map();
        let err = LabelRecord::new(
            &map,
            Modality::Ct,
            None,
            "axial".into(),
            "lower body".into(),
            vec!["brain".into()],
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn mr_requires_protocol_ct_forbids_it() {
        let map = OrganStationMap::default_map();
        assert!(LabelRecord::new(&map, Modality::Mr, None, "axial".into(), "head".into(), vec!["brain".into()]).is_err());
        assert!(LabelRecord::new(&map, Modality::Ct, Some("T1".into()), "axial".into(), "head".into(), vec!["brain".into()]).is_err());
        let ok = LabelRecord::new(&map, Modality::Mr, Some("T2".into()), "sagittal".into(), "lower body".into(), vec!["knee".into()]).unwrap();
        assert_eq!(ok.modality_phrase(), "MR T2");
    }

    #[test]
    fn map_hash_tracks_content() {
        let map = OrganStationMap::default_map();
        assert_eq!(map.hash().len(), 64);
        let other = OrganStationMap::parse(&format!("{DEFAULT_MAP_TEXT}\n# comment")).unwrap();
        assert_ne!(map.hash(), other.hash());
        assert_eq!(map.organs_of("head"), other.organs_of("head"));
    }
}
