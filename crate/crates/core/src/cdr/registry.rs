use std::collections::HashMap;
use std::io::BufRead;

use crate::geo::GeoPoint;

use super::{fields, CdrError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AntennaKey(pub(crate) u32);

/// Dense index of a district. Keys are assigned in ascending id order, so
/// comparing keys compares ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DistrictKey(pub(crate) u32);

impl AntennaKey {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl DistrictKey {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntennaSpec {
    pub id: String,
    pub location: GeoPoint,
    pub district: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictSpec {
    pub id: String,
    pub name: String,
    pub rent_cost: Option<f64>,
}

impl DistrictSpec {
    pub fn new(id: &str, name: &str, rent_cost: Option<f64>) -> Self {
        Self {
            id: id.to_owned(),
            name: name.to_owned(),
            rent_cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Antenna {
    pub id: String,
    pub location: GeoPoint,
    pub district: DistrictKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct District {
    pub id: String,
    pub name: String,
    /// Rent cost per square meter; `None` when the attribute file lacks it.
    pub rent_cost: Option<f64>,
    pub antennas: Vec<AntennaKey>,
}

/// Antenna and district lookup tables.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    antennas: Vec<Antenna>,
    antenna_index: HashMap<String, AntennaKey>,
    districts: Vec<District>,
    district_index: HashMap<String, DistrictKey>,
}

impl Registry {
    /// Districts named by antennas but missing from `districts` are created
    /// without attributes.
    pub fn new(mut antennas: Vec<AntennaSpec>, mut districts: Vec<DistrictSpec>) -> Result<Self, CdrError> {
        for a in &antennas {
            if !districts.iter().any(|d| d.id == a.district) {
                districts.push(DistrictSpec::new(&a.district, "", None));
            }
        }
        districts.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = districts.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CdrError::DuplicateId(w[0].id.clone()));
        }
        antennas.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = antennas.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CdrError::DuplicateId(w[0].id.clone()));
        }

        let district_index: HashMap<_, _> = districts
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), DistrictKey(i as u32)))
            .collect();
        let mut districts: Vec<District> = districts
            .into_iter()
            .map(|d| District {
                id: d.id,
                name: d.name,
                rent_cost: d.rent_cost,
                antennas: Vec::new(),
            })
            .collect();
        let mut antenna_index = HashMap::with_capacity(antennas.len());
        let antennas: Vec<Antenna> = antennas
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let key = AntennaKey(i as u32);
                let district = district_index[&a.district];
                districts[district.index()].antennas.push(key);
                antenna_index.insert(a.id.clone(), key);
                Antenna {
                    id: a.id,
                    location: a.location,
                    district,
                }
            })
            .collect();
        Ok(Self {
            antennas,
            antenna_index,
            districts,
            district_index,
        })
    }

    /// Reads `antenna_id,lat_deg,lon_deg,district_id` rows and optionally
    /// `district_id,name,rent_cost_per_m2` rows; each input has one header line.
    pub fn from_readers<A: BufRead, D: BufRead>(antennas: A, districts: Option<D>) -> Result<Self, CdrError> {
        let mut specs = Vec::new();
        for (lineno, line) in antennas.lines().enumerate().skip(1) {
            let line = line.map_err(|e| CdrError::io("antenna registry", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let spec = parse_antenna_row(&line).map_err(|e| e.at("antenna registry", lineno + 1))?;
            specs.push(spec);
        }
        let mut dspecs = Vec::new();
        if let Some(districts) = districts {
            for (lineno, line) in districts.lines().enumerate().skip(1) {
                let line = line.map_err(|e| CdrError::io("district attributes", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let spec = parse_district_row(&line).map_err(|e| e.at("district attributes", lineno + 1))?;
                dspecs.push(spec);
            }
        }
        Self::new(specs, dspecs)
    }

    pub fn antennas(&self) -> &[Antenna] {
        &self.antennas
    }

    pub fn districts(&self) -> &[District] {
        &self.districts
    }

    pub fn antenna(&self, key: AntennaKey) -> &Antenna {
        &self.antennas[key.index()]
    }

    pub fn district(&self, key: DistrictKey) -> &District {
        &self.districts[key.index()]
    }

    pub fn antenna_key(&self, id: &str) -> Option<AntennaKey> {
        self.antenna_index.get(id).copied()
    }

    pub fn district_key(&self, id: &str) -> Option<DistrictKey> {
        self.district_index.get(id).copied()
    }

    pub fn district_keys(&self) -> impl Iterator<Item = DistrictKey> + '_ {
        (0..self.districts.len() as u32).map(DistrictKey)
    }

    /// Unweighted mean of the district's antenna coordinates.
    pub fn district_centroid(&self, key: DistrictKey) -> Option<GeoPoint> {
        let ants = &self.district(key).antennas;
        if ants.is_empty() {
            return None;
        }
        let n = ants.len() as f64;
        let (lat, lon) = ants.iter().fold((0.0, 0.0), |(la, lo), a| {
            let p = self.antenna(*a).location;
            (la + p.lat, lo + p.lon)
        });
        Some(GeoPoint {
            lat: lat / n,
            lon: lon / n,
        })
    }

    pub fn to_antenna_csv(&self) -> String {
        let mut out = String::from("antenna_id,lat_deg,lon_deg,district_id\n");
        for a in &self.antennas {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.id,
                a.location.lat,
                a.location.lon,
                self.district(a.district).id
            ));
        }
        out
    }

    pub fn to_district_csv(&self) -> String {
        let mut out = String::from("district_id,name,rent_cost_per_m2\n");
        for d in &self.districts {
            let rent = d.rent_cost.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", d.id, d.name, rent));
        }
        out
    }
}

fn parse_antenna_row(line: &str) -> Result<AntennaSpec, CdrError> {
    let [id, lat, lon, district] = fields::<4>(line)?;
    let lat: f64 = parse_f64("lat_deg", lat)?;
    let lon: f64 = parse_f64("lon_deg", lon)?;
    let location = GeoPoint::new(lat, lon).map_err(|_| CdrError::BadCoordinate { lat, lon })?;
    Ok(AntennaSpec {
        id: id.to_owned(),
        location,
        district: district.to_owned(),
    })
}

fn parse_district_row(line: &str) -> Result<DistrictSpec, CdrError> {
    let [id, name, rent] = fields::<3>(line)?;
    let rent_cost = if rent.is_empty() {
        None
    } else {
        Some(parse_f64("rent_cost_per_m2", rent)?)
    };
    Ok(DistrictSpec::new(id, name, rent_cost))
}

fn parse_f64(field: &'static str, v: &str) -> Result<f64, CdrError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| CdrError::BadNumber {
            field,
            value: v.to_owned(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANTENNAS: &str = "antenna_id,lat_deg,lon_deg,district_id\nA2,41.0,29.0,D9\nA1,41.1,29.2,D1\nA3,41.2,29.0,D1\n";
    const DISTRICTS: &str = "district_id,name,rent_cost_per_m2\nD9,Nine,12.5\nD1,One,30\n";

    #[test]
    fn load_and_lookup() {
        let reg = Registry::from_readers(ANTENNAS.as_bytes(), Some(DISTRICTS.as_bytes())).unwrap();
        assert_eq!(reg.antennas().len(), 3);
        let d1 = reg.district_key("D1").unwrap();
        let d9 = reg.district_key("D9").unwrap();
        assert!(d1 < d9, "keys follow id order");
        assert_eq!(reg.district(d9).rent_cost, Some(12.5));
        assert_eq!(reg.district(d1).antennas.len(), 2);
        let c = reg.district_centroid(d1).unwrap();
        assert!((c.lat - 41.15).abs() < 1e-12 && (c.lon - 29.1).abs() < 1e-12);
        assert_eq!(reg.antenna(reg.antenna_key("A2").unwrap()).district, d9);
    }

    #[test]
    fn districts_without_attributes_are_created() {
        let reg = Registry::from_readers(ANTENNAS.as_bytes(), None::<&[u8]>).unwrap();
        assert_eq!(reg.districts().len(), 2);
        assert!(reg.districts().iter().all(|d| d.rent_cost.is_none()));
    }

    #[test]
    fn bad_rows_are_reported() {
        let bad = "antenna_id,lat_deg,lon_deg,district_id\nA1,95.0,29.0,D1\n";
        assert!(matches!(
            Registry::from_readers(bad.as_bytes(), None::<&[u8]>),
            Err(CdrError::AtLine { line: 2, .. })
        ));
        let dup = "antenna_id,lat_deg,lon_deg,district_id\nA1,41,29,D1\nA1,41,29,D1\n";
        assert!(matches!(
            Registry::from_readers(dup.as_bytes(), None::<&[u8]>),
            Err(CdrError::DuplicateId(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let reg = Registry::from_readers(ANTENNAS.as_bytes(), Some(DISTRICTS.as_bytes())).unwrap();
        let again = Registry::from_readers(
            reg.to_antenna_csv().as_bytes(),
            Some(reg.to_district_csv().as_bytes()),
        )
        .unwrap();
        assert_eq!(reg.antennas(), again.antennas());
        assert_eq!(reg.districts(), again.districts());
    }
}
