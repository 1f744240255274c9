use std::collections::HashMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::raster::Rgb;
use super::Category;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LegendEntry {
    Category(Category),
    Background,
}

/// Exact-RGB color coding of a map tile. Each category owns at most one
/// color; any number of colors may be declared as background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorLegend {
    entries: Vec<(Rgb, LegendEntry)>,
}

impl ColorLegend {
    pub fn new(entries: Vec<(Rgb, LegendEntry)>) -> Result<Self> {
        let mut colors: HashMap<Rgb, ()> = HashMap::new();
        let mut seen = [false; Category::COUNT];
        for (rgb, entry) in &entries {
            if colors.insert(*rgb, ()).is_some() {
                return Err(Error::invalid(format!("legend color {} declared twice", hex_color(*rgb))));
            }
            if let LegendEntry::Category(c) = entry {
                if std::mem::replace(&mut seen[c.index()], true) {
                    return Err(Error::invalid(format!("legend category {} declared twice", c.name())));
                }
            }
        }
        Ok(ColorLegend { entries })
    }

    pub fn lookup(&self, rgb: Rgb) -> Option<LegendEntry> {
        self.entries.iter().find(|(c, _)| *c == rgb).map(|(_, e)| *e)
    }

    pub fn color_of(&self, category: Category) -> Option<Rgb> {
        self.entries
            .iter()
            .find(|(_, e)| *e == LegendEntry::Category(category))
            .map(|(c, _)| *c)
    }

    pub fn background_colors(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.entries
            .iter()
            .filter(|(_, e)| *e == LegendEntry::Background)
            .map(|(c, _)| *c)
    }

    pub fn entries(&self) -> &[(Rgb, LegendEntry)] {
        &self.entries
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// A legend with a distinct color for every category and a light-grey
    /// background, used by the synthetic corpus.
    pub fn standard() -> Self {
        let colors: [Rgb; Category::COUNT] = [
            [0xff, 0xd7, 0x00],
            [0xff, 0x8c, 0x00],
            [0xe6, 0x19, 0x4b],
            [0x80, 0x80, 0x80],
            [0xa9, 0x8b, 0x5e],
            [0x43, 0x63, 0xd8],
            [0xf0, 0x32, 0xe6],
            [0x42, 0xa5, 0xf5],
            [0x3c, 0xb4, 0x4b],
            [0x91, 0x1e, 0xb4],
            [0x00, 0x80, 0x80],
        ];
        let mut entries: Vec<_> = Category::ALL
            .iter()
            .zip(colors)
            .map(|(c, rgb)| (rgb, LegendEntry::Category(*c)))
            .collect();
        entries.push(([0xf2, 0xf2, 0xf2], LegendEntry::Background));
        ColorLegend::new(entries).expect("standard legend is valid")
    }
}

pub fn hex_color(rgb: Rgb) -> String {
    format!("#{:02X}{:02X}{:02X}", rgb[0], rgb[1], rgb[2])
}

pub fn parse_hex_color(s: &str) -> Result<Rgb> {
    let h = s
        .strip_prefix('#')
        .filter(|h| h.len() == 6 && h.is_ascii())
        .ok_or_else(|| Error::Parse(format!("bad color {s:?}, expected #RRGGBB")))?;
    let byte = |i: usize| {
        u8::from_str_radix(&h[i..i + 2], 16).map_err(|_| Error::Parse(format!("bad color {s:?}")))
    };
    Ok([byte(0)?, byte(2)?, byte(4)?])
}

impl Serialize for ColorLegend {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = ser.serialize_map(Some(self.entries.len()))?;
        for (rgb, entry) in &self.entries {
            let name = match entry {
                LegendEntry::Category(c) => c.name(),
                LegendEntry::Background => "background",
            };
            map.serialize_entry(&hex_color(*rgb), name)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ColorLegend {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct LegendVisitor;

        impl<'de> Visitor<'de> for LegendVisitor {
            type Value = ColorLegend;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping \"#RRGGBB\" to a category name")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<ColorLegend, A::Error> {
                use serde::de::Error as _;
                let mut entries = Vec::new();
                while let Some((color, name)) = map.next_entry::<String, String>()? {
                    let rgb = parse_hex_color(&color).map_err(A::Error::custom)?;
                    let entry = if name == "background" {
                        LegendEntry::Background
                    } else {
                        LegendEntry::Category(Category::from_name(&name).map_err(A::Error::custom)?)
                    };
                    entries.push((rgb, entry));
                }
                ColorLegend::new(entries).map_err(A::Error::custom)
            }
        }

        de.deserialize_map(LegendVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_json_legend() {
        let l = ColorLegend::from_json(r##"{"#00ff00": "park", "#0000FF": "water", "#ffffff": "background", "#eeeeee": "background"}"##)
            .unwrap();
        assert_eq!(l.lookup([0, 255, 0]), Some(LegendEntry::Category(Category::Park)));
        assert_eq!(l.lookup([255, 255, 255]), Some(LegendEntry::Background));
        assert_eq!(l.lookup([1, 2, 3]), None);
        assert_eq!(l.background_colors().count(), 2);
    }

    #[test]
    fn rejects_duplicates() {
        // same color, different spelling
        assert!(ColorLegend::from_json(r##"{"#00ff00": "park", "#00FF00": "water"}"##).is_err());
        assert!(ColorLegend::from_json(r##"{"#00ff00": "park", "#00ee00": "park"}"##).is_err());
        assert!(ColorLegend::from_json(r##"{"#00ff00": "parking"}"##).is_err());
        assert!(ColorLegend::from_json(r##"{"00ff00": "park"}"##).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let l = ColorLegend::standard();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(ColorLegend::from_json(&s).unwrap(), l);
    }
}
