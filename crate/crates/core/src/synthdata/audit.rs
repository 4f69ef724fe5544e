//! Independent consistency check of generated records against their scene.
//!
//! The checker reads the question back, recomputes the answer from the scene
//! and verifies that every attribute the rationale cites holds there. It does
//! not reuse the template code that produced the record.

use super::record::{parse_record_id, VqaRecord, COUNT_WORDS};
use super::scene::{generate_scene, Scene};

fn s(tokens: &[String]) -> Vec<&str> {
    tokens.iter().map(String::as_str).collect()
}

fn parse_cell(r: &str, c: &str) -> Result<(u8, u8), String> {
    let row = r.parse().map_err(|_| format!("bad row {r:?}"))?;
    let col = c.parse().map_err(|_| format!("bad col {c:?}"))?;
    Ok((row, col))
}

/// Re-derives the answer for `record` from `scene`; returns the expected
/// option tokens after checking the rationale's cited evidence.
fn derive(scene: &Scene, record: &VqaRecord) -> Result<Vec<String>, String> {
    let q = s(&record.question_tokens);
    let r = s(&record.gold_rationale_tokens);
    match q.as_slice() {
        ["what", "color", "is", "the", shape, "?"] => {
            let hits: Vec<_> = scene.objects.iter().filter(|o| o.shape.word() == *shape).collect();
            let [obj] = hits.as_slice() else {
                return Err(format!("{} objects with shape {shape}", hits.len()));
            };
            let ["because", "the", rs, "at", "row", rr, "col", rc, "is", rcolor] = r.as_slice() else {
                return Err(format!("unexpected attribute rationale {r:?}"));
            };
            let cell = parse_cell(rr, rc)?;
            let cited = scene.at(cell.0, cell.1).ok_or("rationale cites an empty cell")?;
            if cited.shape.word() != *rs || cited.color.word() != *rcolor || cited.shape.word() != *shape {
                return Err("rationale evidence does not hold in the scene".into());
            }
            Ok(vec![
                "the".into(),
                shape.to_string(),
                "is".into(),
                obj.color.word().into(),
            ])
        }
        ["what", "is", tag, "doing", "?"] => {
            let id = tag.trim_start_matches('[').trim_end_matches(']');
            let obj = scene.by_entity(id).ok_or_else(|| format!("{tag} not in scene"))?;
            let ["because", rtag, "is", "shown", raction] = r.as_slice() else {
                return Err(format!("unexpected action rationale {r:?}"));
            };
            if rtag != tag || obj.action.word() != *raction {
                return Err("rationale evidence does not hold in the scene".into());
            }
            Ok(vec![tag.to_string(), "is".into(), obj.action.word().into()])
        }
        ["what", "is", "at", "row", qr, "col", qc, "?"] => {
            let cell = parse_cell(qr, qc)?;
            let obj = scene.at(cell.0, cell.1).ok_or("question asks about an empty cell")?;
            let ["because", "the", rcolor, rshape, "is", "at", "row", rr, "col", rc] = r.as_slice() else {
                return Err(format!("unexpected spatial rationale {r:?}"));
            };
            if parse_cell(rr, rc)? != cell || obj.color.word() != *rcolor || obj.shape.word() != *rshape {
                return Err("rationale evidence does not hold in the scene".into());
            }
            Ok(vec!["the".into(), obj.color.word().into(), obj.shape.word().into()])
        }
        ["how", "many", "objects", "are", color, "?"] => {
            let matching: Vec<_> = scene.objects.iter().filter(|o| o.color.word() == *color).collect();
            if matching.is_empty() {
                if r != ["because", "no", "object", "is", color] {
                    return Err(format!("unexpected counting rationale {r:?}"));
                }
            } else {
                let ["because", "the", rcolor, "ones", "are", listed @ ..] = r.as_slice() else {
                    return Err(format!("unexpected counting rationale {r:?}"));
                };
                let shapes: Vec<&str> = listed
                    .split(|t| *t == "and")
                    .map(|part| match part {
                        ["the", shape] => Ok(*shape),
                        _ => Err(format!("bad listing {part:?}")),
                    })
                    .collect::<Result<_, _>>()?;
                let want: Vec<&str> = matching.iter().map(|o| o.shape.word()).collect();
                if rcolor != color || shapes != want {
                    return Err("rationale evidence does not hold in the scene".into());
                }
            }
            Ok(vec![COUNT_WORDS[matching.len()].to_string()])
        }
        _ => Err(format!("unrecognised question {q:?}")),
    }
}

/// Checks a record against an explicit scene.
pub fn audit_record(scene: &Scene, record: &VqaRecord) -> Result<(), String> {
    let expected = derive(scene, record)?;
    let hits: Vec<usize> = record
        .options
        .iter()
        .enumerate()
        .filter(|(_, o)| **o == expected)
        .map(|(i, _)| i)
        .collect();
    if hits != [record.gold_answer] {
        return Err(format!(
            "expected answer {expected:?} at gold index {}, found at {hits:?}",
            record.gold_answer
        ));
    }
    for i in 0..record.options.len() {
        for j in i + 1..record.options.len() {
            if record.options[i] == record.options[j] {
                return Err(format!("options {i} and {j} coincide"));
            }
        }
    }
    if record.region_features != scene.region_features() {
        return Err("region features do not match the scene".into());
    }
    Ok(())
}

/// Regenerates the scene named by a synthetic record id and audits against it.
pub fn audit_generated(record: &VqaRecord) -> Result<(), String> {
    let (seed, _) = parse_record_id(&record.record_id)
        .ok_or_else(|| format!("{} is not a synthetic record id", record.record_id))?;
    audit_record(&generate_scene(seed), record)
}
