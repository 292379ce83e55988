//! Binary little-endian PLY with one vertex per surfel.
//!
//! Properties, all `double`: `x y z`, `rot_0..rot_3` (w, x, y, z), `scale_0
//! scale_1` (log scales), `opacity` (logit), `beta`, `latent_0..latent_{D-1}`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::geometry::SurfelCloud;
use crate::{Error, Result};

fn property_names(latent_dim: usize) -> Vec<String> {
    let fixed = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity", "beta"];
    fixed
        .iter()
        .map(|s| s.to_string())
        .chain((0..latent_dim).map(|i| format!("latent_{i}")))
        .collect()
}

pub fn export_ply(cloud: &SurfelCloud, path: &Path) -> Result<()> {
    let names = property_names(cloud.latent_dim);
    let mut out = Vec::new();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment hsplat surfels\nelement vertex {}\n",
        cloud.len()
    );
    for n in &names {
        header.push_str(&format!("property double {n}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    let d = cloud.latent_dim;
    for i in 0..cloud.len() {
        let row = cloud.positions[3 * i..3 * i + 3]
            .iter()
            .chain(&cloud.rotations[4 * i..4 * i + 4])
            .chain(&cloud.log_scales[2 * i..2 * i + 2])
            .chain([&cloud.opacity_logits[i], &cloud.betas[i]])
            .chain(&cloud.latents[d * i..d * (i + 1)]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_ply`].
pub fn import_ply(path: &Path) -> Result<SurfelCloud> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut count = None;
    let mut names = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::Ply("header not terminated".into()));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if first {
            if words != ["ply"] {
                return Err(Error::Ply("missing ply signature".into()));
            }
            first = false;
            continue;
        }
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(Error::Ply(format!("unsupported format {other}"))),
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Ply(format!("bad vertex count {n}")))?)
            }
            ["element", other, ..] => return Err(Error::Ply(format!("unexpected element {other}"))),
            ["property", "double", name] => names.push(name.to_string()),
            ["property", ty, ..] => return Err(Error::Ply(format!("unsupported property type {ty}"))),
            ["end_header"] => break,
            _ => return Err(Error::Ply(format!("unrecognized header line {:?}", line.trim_end()))),
        }
    }
    let count = count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let latent_dim = names.len().checked_sub(11).ok_or_else(|| Error::Ply("too few properties".into()))?;
    if names != property_names(latent_dim) {
        return Err(Error::Ply(format!("unexpected property list {names:?}")));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let stride = names.len() * 8;
    if body.len() != count * stride {
        return Err(Error::Ply(format!("expected {} data bytes, found {}", count * stride, body.len())));
    }
    let mut cloud = SurfelCloud::new(latent_dim);
    for row in body.chunks_exact(stride) {
        let v: Vec<f64> = row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        cloud.positions.extend_from_slice(&v[0..3]);
        cloud.rotations.extend_from_slice(&v[3..7]);
        cloud.log_scales.extend_from_slice(&v[7..9]);
        cloud.opacity_logits.push(v[9]);
        cloud.betas.push(v[10]);
        cloud.latents.extend_from_slice(&v[11..]);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Surfel;
    use nalgebra::Vector3;

    #[test]
    fn empty_cloud_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        export_ply(&SurfelCloud::new(4), &path).unwrap();
        let text = String::from_utf8_lossy(&fs::read(&path).unwrap()).to_string();
        assert!(text.contains("element vertex 0\n"));
        assert_eq!(import_ply(&path).unwrap(), SurfelCloud::new(4));
    }

    #[test]
    fn header_names_and_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let mut cloud = SurfelCloud::new(3);
        cloud.push(&Surfel {
            position: Vector3::new(0.1, -0.2, 0.3),
            rotation: [0.9, 0.1, 0.2, 0.3],
            scale: [0.05, 0.07],
            opacity_logit: 1.5,
            beta: -2.0,
            latent: vec![0.25, -1.0, 3.5],
        });
        export_ply(&cloud, &path).unwrap();
        let text = String::from_utf8_lossy(&fs::read(&path).unwrap()).to_string();
        for n in property_names(3) {
            assert!(text.contains(&format!("property double {n}\n")), "{n}");
        }
        assert_eq!(import_ply(&path).unwrap(), cloud);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(&path, "ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(matches!(import_ply(&path), Err(Error::Ply(_))));
    }
}
