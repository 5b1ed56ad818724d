//! The line-delimited interaction dataset format: one record per line,
//! tab-separated, modality embeddings inline as comma-joined floats with
//! `-` marking a missing modality.

use std::collections::HashMap;
use std::path::Path;

use crate::encoding::{ActionType, Context, Device, Interaction, Platform};
use crate::error::{Error, Result};

const FIELDS: usize = 13;

fn modality_field(values: &Option<Vec<f64>>) -> String {
    match values {
        None => "-".to_string(),
        Some(v) => v
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn record_line(x: &Interaction) -> String {
    let cols = [
        x.user_id.clone(),
        x.item_id.clone(),
        x.action.as_str().to_string(),
        x.context.device.as_str().to_string(),
        x.context.platform.as_str().to_string(),
        x.context.geo.to_string(),
        x.timestamp.to_string(),
        modality_field(&x.modality_embeddings[0]),
        modality_field(&x.modality_embeddings[1]),
        modality_field(&x.modality_embeddings[2]),
        modality_field(&x.modality_embeddings[3]),
        x.score_label.to_string(),
        x.class_label.to_string(),
    ];
    cols.join("\t")
}

pub fn dataset_to_text(sequences: &[(String, Vec<Interaction>)]) -> String {
    let mut out = String::new();
    for (_, seq) in sequences {
        for x in seq {
            out.push_str(&record_line(x));
            out.push('\n');
        }
    }
    out
}

pub fn write_dataset(path: &Path, sequences: &[(String, Vec<Interaction>)]) -> Result<()> {
    std::fs::write(path, dataset_to_text(sequences))?;
    Ok(())
}

fn parse_modality(field: &str, line: usize) -> Result<Option<Vec<f64>>> {
    if field == "-" {
        return Ok(None);
    }
    let values: Vec<f64> = field
        .split(',')
        .map(|v| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or(Error::Parse {
                    line,
                    message: format!("bad embedding value '{v}'"),
                })
        })
        .collect::<Result<_>>()?;
    Ok(Some(values))
}

fn parse_record(line_text: &str, line: usize) -> Result<Interaction> {
    let fields: Vec<&str> = line_text.split('\t').collect();
    if fields.len() != FIELDS {
        return Err(Error::Parse {
            line,
            message: format!("expected {FIELDS} fields, got {}", fields.len()),
        });
    }
    let map_err = |what: &str, value: &str| Error::Parse {
        line,
        message: format!("bad {what} '{value}'"),
    };
    let action = ActionType::parse(fields[2]).map_err(|_| map_err("action", fields[2]))?;
    let device = Device::parse(fields[3]).map_err(|_| map_err("device", fields[3]))?;
    let platform = Platform::parse(fields[4]).map_err(|_| map_err("platform", fields[4]))?;
    let geo: usize = fields[5].parse().map_err(|_| map_err("geo", fields[5]))?;
    let timestamp: i64 = fields[6]
        .parse()
        .ok()
        .filter(|&t| t >= 0)
        .ok_or_else(|| map_err("timestamp", fields[6]))?;
    let score_label: f64 = fields[11]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite())
        .ok_or_else(|| map_err("score", fields[11]))?;
    let class_label: usize = fields[12].parse().map_err(|_| map_err("class", fields[12]))?;
    Ok(Interaction {
        user_id: fields[0].to_string(),
        item_id: fields[1].to_string(),
        action,
        context: Context {
            device,
            platform,
            geo,
        },
        timestamp,
        modality_embeddings: [
            parse_modality(fields[7], line)?,
            parse_modality(fields[8], line)?,
            parse_modality(fields[9], line)?,
            parse_modality(fields[10], line)?,
        ],
        score_label,
        class_label,
    })
}

/// Parse a dataset, grouping records per user (first-appearance order) and
/// sorting each user's records by timestamp (stable for ties).
pub fn parse_dataset(text: &str) -> Result<Vec<(String, Vec<Interaction>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<Interaction>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line, i + 1)?;
        let entry = by_user.entry(record.user_id.clone()).or_insert_with(|| {
            order.push(record.user_id.clone());
            Vec::new()
        });
        entry.push(record);
    }
    if order.is_empty() {
        return Err(Error::validation("dataset contains no records"));
    }
    Ok(order
        .into_iter()
        .map(|user| {
            let mut seq = by_user.remove(&user).expect("grouped above");
            seq.sort_by_key(|x| x.timestamp);
            (user, seq)
        })
        .collect())
}

pub fn read_dataset(path: &Path) -> Result<Vec<(String, Vec<Interaction>)>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

/// Every distinct item with its modality embeddings, first appearance wins.
pub fn item_catalog(
    sequences: &[(String, Vec<Interaction>)],
) -> Vec<(String, [Option<Vec<f64>>; 4])> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut items = Vec::new();
    for (_, seq) in sequences {
        for x in seq {
            if !seen.contains_key(&x.item_id) {
                seen.insert(x.item_id.clone(), items.len());
                items.push((x.item_id.clone(), x.modality_embeddings.clone()));
            }
        }
    }
    items
}

/// Find one item's embeddings in parsed sequences.
pub fn find_item(
    sequences: &[(String, Vec<Interaction>)],
    item_id: &str,
) -> Option<[Option<Vec<f64>>; 4]> {
    for (_, seq) in sequences {
        for x in seq {
            if x.item_id == item_id {
                return Some(x.modality_embeddings.clone());
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Vec<Interaction>)> {
        let x = |user: &str, item: &str, ts: i64| Interaction {
            user_id: user.into(),
            item_id: item.into(),
            action: ActionType::Purchase,
            context: Context {
                device: Device::Tablet,
                platform: Platform::MiniApp,
                geo: 3,
            },
            timestamp: ts,
            modality_embeddings: [
                Some(vec![0.1, -0.25]),
                None,
                Some(vec![1.0 / 3.0, 2.0]),
                None,
            ],
            score_label: 2.125,
            class_label: 1,
        };
        vec![
            ("a".into(), vec![x("a", "i1", 100), x("a", "i2", 300)]),
            ("b".into(), vec![x("b", "i1", 50)]),
        ]
    }

    #[test]
    fn roundtrip_preserves_records_bitwise() {
        let data = sample();
        let text = dataset_to_text(&data);
        let parsed = parse_dataset(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        for ((ua, sa), (ub, sb)) in data.iter().zip(&parsed) {
            assert_eq!(ua, ub);
            for (x, y) in sa.iter().zip(sb) {
                assert_eq!(x.item_id, y.item_id);
                assert_eq!(x.action, y.action);
                assert_eq!(x.timestamp, y.timestamp);
                assert_eq!(x.score_label.to_bits(), y.score_label.to_bits());
                assert_eq!(x.modality_embeddings, y.modality_embeddings);
            }
        }
    }

    #[test]
    fn unsorted_records_are_sorted_per_user() {
        let mut data = sample();
        data[0].1.swap(0, 1);
        let text = dataset_to_text(&data);
        let parsed = parse_dataset(&text).unwrap();
        assert_eq!(parsed[0].1[0].timestamp, 100);
        assert_eq!(parsed[0].1[1].timestamp, 300);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "a\ti1\tclick\tpc\tweb\t0\t10\t1,2\t-\t-\t-\t1.0\t0\nbadline\n";
        match parse_dataset(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_action = "a\ti1\ttap\tpc\tweb\t0\t10\t1,2\t-\t-\t-\t1.0\t0\n";
        assert!(parse_dataset(bad_action).is_err());
        let negative_ts = "a\ti1\tclick\tpc\tweb\t0\t-5\t1,2\t-\t-\t-\t1.0\t0\n";
        assert!(parse_dataset(negative_ts).is_err());
        assert!(parse_dataset("\n\n").is_err());
    }

    #[test]
    fn catalog_and_lookup() {
        let data = sample();
        let items = item_catalog(&data);
        assert_eq!(items.len(), 2);
        assert!(find_item(&data, "i2").is_some());
        assert!(find_item(&data, "zzz").is_none());
    }
}
