//! Plain-text storage for schemas, trajectories and datasets.
//!
//! A dataset is a directory holding one `schema` manifest and one `.traj`
//! file per trajectory. Numbers are written with 17 significant digits so a
//! save/load round trip is bit exact.
//!
//! Trajectory files:
//!
//! ```text
//! schema toy2d
//! skill dribble
//! dt 1.6666666666666667e-2
//! groups hand_pos:robot-pos:2,ball_pos:obj-pos:2,contact:contact:2
//! 0.0e0 8.0e-1 1.0e-1 7.0e-1 | 1 0
//! MASK
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trajectory::{
    ContactGroup, Dataset, Frame, Group, GroupKind, State, StateSchema, Trajectory,
};

pub const SCHEMA_FILE: &str = "schema";
pub const TRAJ_EXT: &str = "traj";

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("invalid number `{tok}`")))
}

pub fn schema_to_string(schema: &StateSchema) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name {}", schema.name);
    match schema.up_axis {
        Some(a) => {
            let _ = writeln!(s, "up_axis {a}");
        }
        None => {
            let _ = writeln!(s, "up_axis none");
        }
    }
    for g in &schema.groups {
        let _ = writeln!(s, "group {} {} {}", g.name, g.kind, g.dim);
    }
    if let Some(c) = &schema.contact {
        let _ = writeln!(s, "group {} contact {}", c.name, c.lambda.len());
    }
    for g in &schema.groups {
        let _ = writeln!(s, "lambda {} {}", g.name, fmt_f64(g.lambda));
    }
    if let Some(c) = &schema.contact {
        let vals: Vec<String> = c.lambda.iter().map(|x| fmt_f64(*x)).collect();
        let _ = writeln!(s, "lambda {} {}", c.name, vals.join(" "));
    }
    for g in &schema.groups {
        let _ = writeln!(s, "epsilon {} {}", g.name, fmt_f64(g.epsilon));
    }
    if let Some(c) = &schema.contact {
        let _ = writeln!(s, "epsilon {} {}", c.name, fmt_f64(0.0));
    }
    s
}

pub fn parse_schema(path: &Path, text: &str) -> Result<StateSchema> {
    let mut name = None;
    let mut up_axis = None;
    let mut decls: Vec<(String, GroupKind, usize, usize)> = Vec::new();
    let mut lambdas: Vec<(String, Vec<f64>, usize)> = Vec::new();
    let mut epsilons: Vec<(String, f64, usize)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks[0] {
            "name" if toks.len() == 2 => name = Some(toks[1].to_string()),
            "up_axis" if toks.len() == 2 => {
                up_axis =
                    match toks[1] {
                        "none" => None,
                        t => Some(t.parse::<usize>().map_err(|_| {
                            Error::parse(path, line, format!("invalid up_axis `{t}`"))
                        })?),
                    }
            }
            "group" if toks.len() == 4 => {
                let kind: GroupKind = toks[2]
                    .parse()
                    .map_err(|e: Error| Error::parse(path, line, e.to_string()))?;
                let dim = toks[3]
                    .parse::<usize>()
                    .map_err(|_| Error::parse(path, line, format!("invalid dim `{}`", toks[3])))?;
                decls.push((toks[1].to_string(), kind, dim, line));
            }
            "lambda" if toks.len() >= 3 => {
                let vals = toks[2..]
                    .iter()
                    .map(|t| parse_f64(path, line, t))
                    .collect::<Result<Vec<_>>>()?;
                lambdas.push((toks[1].to_string(), vals, line));
            }
            "epsilon" if toks.len() == 3 => {
                epsilons.push((toks[1].to_string(), parse_f64(path, line, toks[2])?, line));
            }
            _ => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("malformed schema line `{raw}`"),
                ))
            }
        }
    }

    let name = name.ok_or_else(|| Error::parse(path, 1, "missing `name`"))?;
    let find_decl = |g: &str, line: usize| {
        decls
            .iter()
            .find(|d| d.0 == g)
            .ok_or_else(|| Error::parse(path, line, format!("unknown group `{g}`")))
    };
    for (g, _, line) in &lambdas {
        find_decl(g, *line)?;
    }
    for (g, _, line) in &epsilons {
        find_decl(g, *line)?;
    }

    let mut groups = Vec::new();
    let mut contact = None;
    for (gname, kind, dim, line) in &decls {
        let lambda = lambdas
            .iter()
            .find(|l| &l.0 == gname)
            .ok_or_else(|| Error::parse(path, *line, format!("no lambda for group `{gname}`")))?;
        if *kind == GroupKind::Contact {
            if lambda.1.len() != *dim {
                return Err(Error::parse(
                    path,
                    lambda.2,
                    format!("contact lambda needs {dim} values"),
                ));
            }
            if contact.is_some() {
                return Err(Error::parse(path, *line, "more than one contact group"));
            }
            contact = Some(ContactGroup {
                name: gname.clone(),
                lambda: lambda.1.clone(),
            });
            continue;
        }
        if lambda.1.len() != 1 {
            return Err(Error::parse(path, lambda.2, "lambda takes one value"));
        }
        let epsilon = epsilons
            .iter()
            .find(|e| &e.0 == gname)
            .ok_or_else(|| Error::parse(path, *line, format!("no epsilon for group `{gname}`")))?;
        groups.push(Group {
            name: gname.clone(),
            kind: *kind,
            dim: *dim,
            lambda: lambda.1[0],
            epsilon: epsilon.1,
        });
    }
    StateSchema::new(name, groups, contact, up_axis)
        .map_err(|e| Error::parse(path, 1, e.to_string()))
}

fn groups_header(schema: &StateSchema) -> String {
    let mut parts: Vec<String> = schema
        .groups
        .iter()
        .map(|g| format!("{}:{}:{}", g.name, g.kind, g.dim))
        .collect();
    if let Some(c) = &schema.contact {
        parts.push(format!("{}:contact:{}", c.name, c.lambda.len()));
    }
    parts.join(",")
}

pub fn trajectory_to_string(schema: &StateSchema, traj: &Trajectory) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema {}", schema.name);
    let _ = writeln!(s, "skill {}", traj.skill);
    let _ = writeln!(s, "dt {}", fmt_f64(traj.dt));
    let _ = writeln!(s, "groups {}", groups_header(schema));
    for frame in &traj.frames {
        match frame {
            Frame::Masked => s.push_str("MASK\n"),
            Frame::Real(state) => {
                let vals: Vec<String> = state
                    .channels
                    .iter()
                    .flatten()
                    .map(|x| fmt_f64(*x))
                    .collect();
                s.push_str(&vals.join(" "));
                s.push_str(" |");
                for c in &state.contacts {
                    s.push_str(if *c { " 1" } else { " 0" });
                }
                s.push('\n');
            }
        }
    }
    s
}

pub fn parse_trajectory(path: &Path, schema: &StateSchema, text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut header = |key: &str| -> Result<(usize, String)> {
        let (line, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, format!("missing `{key}` header")))?;
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| {
                Error::parse(path, line, format!("malformed header, expected `{key}`"))
            })?;
        Ok((line, rest.trim().to_string()))
    };
    let (line, schema_name) = header("schema")?;
    if schema_name != schema.name {
        return Err(Error::parse(
            path,
            line,
            format!("schema `{schema_name}` does not match `{}`", schema.name),
        ));
    }
    let (_, skill) = header("skill")?;
    let (line, dt) = header("dt")?;
    let dt = parse_f64(path, line, &dt)?;
    let (line, groups) = header("groups")?;
    for decl in groups.split(',') {
        let parts: Vec<&str> = decl.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!("malformed group `{decl}`"),
            ));
        }
        let known = if parts[1] == "contact" {
            schema
                .contact
                .as_ref()
                .is_some_and(|c| c.name == parts[0] && c.lambda.len().to_string() == parts[2])
        } else {
            schema.groups.iter().any(|g| {
                g.name == parts[0] && g.kind.as_str() == parts[1] && g.dim.to_string() == parts[2]
            })
        };
        if !known {
            return Err(Error::parse(path, line, format!("unknown group `{decl}`")));
        }
    }
    if groups != groups_header(schema) {
        return Err(Error::parse(path, line, "group order differs from schema"));
    }

    let width = schema.channel_dim();
    let pairs = schema.contact_pairs();
    let mut frames = Vec::new();
    for (line, l) in lines {
        if l.is_empty() {
            continue;
        }
        if l == "MASK" {
            frames.push(Frame::Masked);
            continue;
        }
        let (vals, bits) = l
            .split_once('|')
            .ok_or_else(|| Error::parse(path, line, "missing `|` before contact bits"))?;
        let vals: Vec<&str> = vals.split_whitespace().collect();
        let bits: Vec<&str> = bits.split_whitespace().collect();
        if vals.len() != width || bits.len() != pairs {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "row has {} values and {} contact bits, expected {width} and {pairs}",
                    vals.len(),
                    bits.len()
                ),
            ));
        }
        let mut it = vals.iter();
        let mut channels = Vec::with_capacity(schema.groups.len());
        for g in &schema.groups {
            let v = it
                .by_ref()
                .take(g.dim)
                .map(|t| parse_f64(path, line, t))
                .collect::<Result<Vec<_>>>()?;
            channels.push(v);
        }
        let contacts = bits
            .iter()
            .map(|b| match *b {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(
                    path,
                    line,
                    format!("invalid contact bit `{other}`"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(Frame::Real(State { channels, contacts }));
    }
    Ok(Trajectory { skill, dt, frames })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_schema(path: &Path) -> Result<StateSchema> {
    parse_schema(path, &read(path)?)
}

pub fn save_schema(schema: &StateSchema, path: &Path) -> Result<()> {
    write(path, &schema_to_string(schema))
}

pub fn load_trajectory(path: &Path, schema: &StateSchema) -> Result<Trajectory> {
    parse_trajectory(path, schema, &read(path)?)
}

pub fn save_trajectory(schema: &StateSchema, traj: &Trajectory, path: &Path) -> Result<()> {
    write(path, &trajectory_to_string(schema, traj))
}

/// File name used for the `index`-th trajectory of `skill`.
pub fn trajectory_file_name(skill: &str, index: usize) -> String {
    format!("{skill}_{index:03}.{TRAJ_EXT}")
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema = load_schema(&dir.join(SCHEMA_FILE))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == TRAJ_EXT))
        .collect();
    files.sort();
    let mut ds = Dataset::new(schema);
    for f in files {
        let t = load_trajectory(&f, &ds.schema)?;
        ds.push(t);
    }
    Ok(ds)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_schema(&dataset.schema, &dir.join(SCHEMA_FILE))?;
    for (skill, trajs) in &dataset.skills {
        for (i, t) in trajs.iter().enumerate() {
            save_trajectory(
                &dataset.schema,
                t,
                &dir.join(trajectory_file_name(skill, i)),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::small_schema;
    use crate::trajectory::validate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, schema: &StateSchema, skill: &str) -> Trajectory {
        let n = rng.random_range(2..12);
        let frames = (0..n)
            .map(|i| {
                if i > 0 && i + 1 < n && rng.random_bool(0.2) {
                    Frame::Masked
                } else {
                    let mut s = State::zeros(schema);
                    for v in s.channels.iter_mut().flatten() {
                        *v = rng.random_range(-1e3..1e3) * rng.random::<f64>().powi(7);
                    }
                    for c in &mut s.contacts {
                        *c = rng.random();
                    }
                    Frame::Real(s)
                }
            })
            .collect();
        Trajectory {
            skill: skill.into(),
            dt: rng.random_range(1e-3..0.1),
            frames,
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let schema = small_schema(Some(1));
        let mut ds = Dataset::new(schema.clone());
        ds.push(random_traj(&mut rng, &schema, "alpha"));
        ds.push(random_traj(&mut rng, &schema, "alpha"));
        ds.push(random_traj(&mut rng, &schema, "beta"));
        assert!(validate(&ds).is_empty());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn mask_row_parses_as_masked_frame() {
        let schema = small_schema(None);
        let text = "schema test\nskill a\ndt 0.5\n\
            groups root:robot-pos:2,vel:robot-vel:2,ball:obj-pos:2,rel:relative:2,contact:contact:2\n\
            1 2 3 4 5 6 7 8 | 1 0\nMASK\n1 2 3 4 5 6 7 8 | 0 0\n";
        let t = parse_trajectory(Path::new("t.traj"), &schema, text).unwrap();
        assert_eq!(t.frames.len(), 3);
        assert!(t.frames[1].is_masked());
        assert_eq!(t.real(0).unwrap().channels[2], vec![5.0, 6.0]);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let schema = small_schema(None);
        let text = "schema test\nskill a\ndt 0.5\n\
            groups root:robot-pos:2,vel:robot-vel:2,ball:obj-pos:2,rel:relative:2,contact:contact:2\n\
            1 2 3 4 5 6 7 8 | 1 0\n1 2 3 4 5 6 7 | 1 0\n";
        let err = parse_trajectory(Path::new("t.traj"), &schema, text).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 6),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_group_and_bad_header_are_errors() {
        let schema = small_schema(None);
        let text = "schema test\nskill a\ndt 0.5\ngroups root:robot-pos:2,foo:obj-pos:2\n";
        let err = parse_trajectory(Path::new("t.traj"), &schema, text).unwrap_err();
        assert!(err.to_string().contains("unknown group"), "{err}");
        let err = parse_trajectory(Path::new("t.traj"), &schema, "skil a\n").unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn schema_manifest_round_trip() {
        let schema = small_schema(Some(1));
        let text = schema_to_string(&schema);
        assert_eq!(parse_schema(Path::new("schema"), &text).unwrap(), schema);
        let bad = text.replace("lambda rel", "lambda nope");
        assert!(parse_schema(Path::new("schema"), &bad).is_err());
    }
}
