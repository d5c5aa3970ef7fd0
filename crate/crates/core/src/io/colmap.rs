//! COLMAP sparse models in the binary (`*.bin`) and text (`*.txt`) layouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// `(model id, name, parameter count)` for every model COLMAP defines.
const MODELS: &[(i32, &str, usize)] = &[
    (0, "SIMPLE_PINHOLE", 3),
    (1, "PINHOLE", 4),
    (2, "SIMPLE_RADIAL", 4),
    (3, "RADIAL", 5),
    (4, "OPENCV", 8),
    (5, "OPENCV_FISHEYE", 8),
    (6, "FULL_OPENCV", 12),
    (7, "FOV", 5),
    (8, "SIMPLE_RADIAL_FISHEYE", 4),
    (9, "RADIAL_FISHEYE", 5),
    (10, "THIN_PRISM_FISHEYE", 12),
];

fn model_by_id(id: i32) -> Option<(&'static str, usize)> {
    MODELS.iter().find(|m| m.0 == id).map(|m| (m.1, m.2))
}

fn model_by_name(name: &str) -> Option<(i32, usize)> {
    MODELS.iter().find(|m| m.1 == name).map(|m| (m.0, m.2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// Maps pinhole models onto [`Camera`] with the given pose.
    pub fn to_camera(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Camera> {
        let (fx, fy, cx, cy) = match (self.model.as_str(), self.params.as_slice()) {
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => (f, f, cx, cy),
            ("PINHOLE", &[fx, fy, cx, cy]) => (fx, fy, cx, cy),
            _ => return Err(Error::UnsupportedCameraModel(self.model.clone())),
        };
        Camera::new(rotation, translation, fx, fy, cx, cy, self.width as usize, self.height as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation as `(w, x, y, z)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3d_id)`; unmatched keypoints carry id −1.
    pub points2d: Vec<(f64, f64, i64)>,
}

impl ColmapImage {
    pub fn rotation(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.qvec;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.tvec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)` observations.
    pub track: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: BTreeMap<u32, ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

/// A posed view resolved from a model.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub name: String,
    pub camera: Camera,
}

impl ColmapModel {
    /// Cameras for every registered image, sorted by image name.
    pub fn views(&self) -> Result<Vec<PosedView>> {
        let mut out = self
            .images
            .values()
            .map(|img| {
                let cam = self.cameras.get(&img.camera_id).ok_or_else(|| {
                    Error::InvalidInput(format!("image {} references missing camera {}", img.name, img.camera_id))
                })?;
                Ok(PosedView {
                    name: img.name.clone(),
                    camera: cam.to_camera(img.rotation(), img.translation())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    /// Sparse points with colors scaled to the unit range.
    pub fn point_cloud(&self) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        self.points
            .iter()
            .map(|p| (Vector3::from(p.xyz), Vector3::from(p.rgb.map(|c| c as f64 / 255.0))))
            .unzip()
    }

    fn check_supported(&self) -> Result<()> {
        match self
            .cameras
            .values()
            .find(|c| c.model != "SIMPLE_PINHOLE" && c.model != "PINHOLE")
        {
            Some(c) => Err(Error::UnsupportedCameraModel(c.model.clone())),
            None => Ok(()),
        }
    }
}

/// Reads `cameras`, `images` and `points3D` from `dir`, preferring the
/// binary files when both layouts are present. Fails on camera models other
/// than the two pinhole variants.
pub fn read_colmap(dir: &Path) -> Result<ColmapModel> {
    let model = read_colmap_any(dir)?;
    model.check_supported()?;
    Ok(model)
}

/// Like [`read_colmap`] without the camera-model restriction.
pub fn read_colmap_any(dir: &Path) -> Result<ColmapModel> {
    let sub = dir.join("sparse").join("0");
    let dir = if !dir.join("cameras.bin").exists() && !dir.join("cameras.txt").exists() && sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    };
    if dir.join("cameras.bin").exists() {
        read_binary(&dir)
    } else if dir.join("cameras.txt").exists() {
        read_text(&dir)
    } else {
        Err(Error::format(dir.join("cameras.bin"), "no COLMAP model found"))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Element count that must fit in the remaining bytes.
    fn count(&mut self, min_item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(min_item_size as u64) > left {
            return Err(Error::format(self.path, format!("count {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(
                self.path,
                format!("{} bytes of trailing data", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_binary(dir: &Path) -> Result<ColmapModel> {
    let mut model = ColmapModel::default();

    let path = dir.join("cameras.bin");
    let bytes = read_file(&path)?;
    let mut r = Reader { data: &bytes, pos: 0, path: &path };
    for _ in 0..r.count(24)? {
        let id = r.i32()?;
        let model_id = r.i32()?;
        let (name, nparams) = model_by_id(model_id)
            .ok_or_else(|| Error::format(&path, format!("unknown camera model id {model_id}")))?;
        let (width, height) = (r.u64()?, r.u64()?);
        let params = (0..nparams).map(|_| r.f64()).collect::<Result<_>>()?;
        let cam = ColmapCamera {
            id: id as u32,
            model: name.to_string(),
            width,
            height,
            params,
        };
        if model.cameras.insert(cam.id, cam).is_some() {
            return Err(Error::format(&path, format!("duplicate camera id {id}")));
        }
    }
    r.finish()?;

    let path = dir.join("images.bin");
    let bytes = read_file(&path)?;
    let mut r = Reader { data: &bytes, pos: 0, path: &path };
    for _ in 0..r.count(69)? {
        let id = r.u32()?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = r.f64()?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = r.f64()?;
        }
        let camera_id = r.u32()?;
        let mut name = Vec::new();
        loop {
            match r.u8()? {
                0 => break,
                b => name.push(b),
            }
        }
        let name = String::from_utf8(name).map_err(|_| Error::format(&path, "image name is not UTF-8"))?;
        let n = r.count(24)?;
        let points2d = (0..n)
            .map(|_| Ok((r.f64()?, r.f64()?, r.i64()?)))
            .collect::<Result<_>>()?;
        let img = ColmapImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d,
        };
        if model.images.insert(id, img).is_some() {
            return Err(Error::format(&path, format!("duplicate image id {id}")));
        }
    }
    r.finish()?;

    let path = dir.join("points3D.bin");
    let bytes = read_file(&path)?;
    let mut r = Reader { data: &bytes, pos: 0, path: &path };
    for _ in 0..r.count(43)? {
        let id = r.u64()?;
        let xyz = [r.f64()?, r.f64()?, r.f64()?];
        let rgb = [r.u8()?, r.u8()?, r.u8()?];
        let error = r.f64()?;
        let n = r.count(8)?;
        let track = (0..n).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<_>>()?;
        model.points.push(ColmapPoint {
            id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    r.finish()?;
    Ok(model)
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::format(path, format!("line {line}: missing field")))?;
    tok.parse()
        .map_err(|_| Error::format(path, format!("line {line}: cannot parse {tok:?}")))
}

fn read_text_file(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))
}

fn read_text(dir: &Path) -> Result<ColmapModel> {
    let mut model = ColmapModel::default();

    let path = dir.join("cameras.txt");
    for (ln, line) in content_lines(&read_text_file(&path)?) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = parse(&path, ln, it.next())?;
        let name: String = parse(&path, ln, it.next())?;
        let (_, nparams) =
            model_by_name(&name).ok_or_else(|| Error::format(&path, format!("line {ln}: unknown model {name}")))?;
        let width = parse(&path, ln, it.next())?;
        let height = parse(&path, ln, it.next())?;
        let params: Vec<f64> = it.map(|t| parse(&path, ln, Some(t))).collect::<Result<_>>()?;
        if params.len() != nparams {
            return Err(Error::format(
                &path,
                format!("line {ln}: {name} takes {nparams} parameters, found {}", params.len()),
            ));
        }
        let cam = ColmapCamera {
            id,
            model: name,
            width,
            height,
            params,
        };
        if model.cameras.insert(id, cam).is_some() {
            return Err(Error::format(&path, format!("line {ln}: duplicate camera id {id}")));
        }
    }

    // Images take two lines each; the keypoint line may be blank, so blank
    // lines are significant here.
    let path = dir.join("images.txt");
    let text = read_text_file(&path)?;
    let mut lines = content_lines(&text).peekable();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = parse(&path, ln, it.next())?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = parse(&path, ln, it.next())?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = parse(&path, ln, it.next())?;
        }
        let camera_id = parse(&path, ln, it.next())?;
        let name: String = parse(&path, ln, it.next())?;
        if it.next().is_some() {
            return Err(Error::format(&path, format!("line {ln}: trailing fields")));
        }
        let (pln, pline) = lines
            .next()
            .ok_or_else(|| Error::format(&path, format!("line {ln}: missing keypoint line")))?;
        let toks: Vec<&str> = pline.split_whitespace().collect();
        if toks.len() % 3 != 0 {
            return Err(Error::format(&path, format!("line {pln}: keypoints come in triples")));
        }
        let points2d = toks
            .chunks(3)
            .map(|c| {
                Ok((
                    parse(&path, pln, Some(c[0]))?,
                    parse(&path, pln, Some(c[1]))?,
                    parse(&path, pln, Some(c[2]))?,
                ))
            })
            .collect::<Result<_>>()?;
        let img = ColmapImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d,
        };
        if model.images.insert(id, img).is_some() {
            return Err(Error::format(&path, format!("line {ln}: duplicate image id {id}")));
        }
    }

    let path = dir.join("points3D.txt");
    for (ln, line) in content_lines(&read_text_file(&path)?) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id = parse(&path, ln, it.next())?;
        let xyz = [
            parse(&path, ln, it.next())?,
            parse(&path, ln, it.next())?,
            parse(&path, ln, it.next())?,
        ];
        let rgb = [
            parse(&path, ln, it.next())?,
            parse(&path, ln, it.next())?,
            parse(&path, ln, it.next())?,
        ];
        let error = parse(&path, ln, it.next())?;
        let rest: Vec<&str> = it.collect();
        if rest.len() % 2 != 0 {
            return Err(Error::format(&path, format!("line {ln}: track entries come in pairs")));
        }
        let track = rest
            .chunks(2)
            .map(|c| Ok((parse(&path, ln, Some(c[0]))?, parse(&path, ln, Some(c[1]))?)))
            .collect::<Result<_>>()?;
        model.points.push(ColmapPoint {
            id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    Ok(model)
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the text layout. Floats use the shortest representation that
/// parses back to the same value, so the round trip is exact.
pub fn write_colmap_text(dir: &Path, model: &ColmapModel) -> Result<()> {
    ensure_dir(dir)?;
    let mut s = String::from("# Camera list with one line of data per camera:\n");
    s.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in model.cameras.values() {
        model_by_name(&c.model).ok_or_else(|| Error::InvalidInput(format!("unknown camera model {}", c.model)))?;
        write!(s, "{} {} {} {}", c.id, c.model, c.width, c.height).unwrap();
        for p in &c.params {
            write!(s, " {p:?}").unwrap();
        }
        s.push('\n');
    }
    write_file(dir.join("cameras.txt"), s.as_bytes())?;

    let mut s = String::from("# Image list with two lines of data per image:\n");
    s.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    s.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for img in model.images.values() {
        if img.name.is_empty() || img.name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("image name {:?} cannot be written as text", img.name)));
        }
        write!(s, "{}", img.id).unwrap();
        for v in img.qvec.iter().chain(&img.tvec) {
            write!(s, " {v:?}").unwrap();
        }
        writeln!(s, " {} {}", img.camera_id, img.name).unwrap();
        let kp: Vec<String> = img.points2d.iter().map(|(x, y, id)| format!("{x:?} {y:?} {id}")).collect();
        s.push_str(&kp.join(" "));
        s.push('\n');
    }
    write_file(dir.join("images.txt"), s.as_bytes())?;

    let mut s = String::from("# 3D point list with one line of data per point:\n");
    s.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &model.points {
        write!(
            s,
            "{} {:?} {:?} {:?} {} {} {} {:?}",
            p.id, p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.error
        )
        .unwrap();
        for (i, k) in &p.track {
            write!(s, " {i} {k}").unwrap();
        }
        s.push('\n');
    }
    write_file(dir.join("points3D.txt"), s.as_bytes())
}

pub fn write_colmap_binary(dir: &Path, model: &ColmapModel) -> Result<()> {
    ensure_dir(dir)?;
    let mut b = Vec::new();
    b.extend_from_slice(&(model.cameras.len() as u64).to_le_bytes());
    for c in model.cameras.values() {
        let (id, n) =
            model_by_name(&c.model).ok_or_else(|| Error::InvalidInput(format!("unknown camera model {}", c.model)))?;
        if n != c.params.len() {
            return Err(Error::InvalidInput(format!("{} takes {n} parameters", c.model)));
        }
        b.extend_from_slice(&(c.id as i32).to_le_bytes());
        b.extend_from_slice(&id.to_le_bytes());
        b.extend_from_slice(&c.width.to_le_bytes());
        b.extend_from_slice(&c.height.to_le_bytes());
        c.params.iter().for_each(|p| b.extend_from_slice(&p.to_le_bytes()));
    }
    write_file(dir.join("cameras.bin"), &b)?;

    let mut b = Vec::new();
    b.extend_from_slice(&(model.images.len() as u64).to_le_bytes());
    for img in model.images.values() {
        if img.name.as_bytes().contains(&0) {
            return Err(Error::InvalidInput("image name contains NUL".into()));
        }
        b.extend_from_slice(&img.id.to_le_bytes());
        img.qvec.iter().chain(&img.tvec).for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        b.extend_from_slice(&img.camera_id.to_le_bytes());
        b.extend_from_slice(img.name.as_bytes());
        b.push(0);
        b.extend_from_slice(&(img.points2d.len() as u64).to_le_bytes());
        for (x, y, id) in &img.points2d {
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
            b.extend_from_slice(&id.to_le_bytes());
        }
    }
    write_file(dir.join("images.bin"), &b)?;

    let mut b = Vec::new();
    b.extend_from_slice(&(model.points.len() as u64).to_le_bytes());
    for p in &model.points {
        b.extend_from_slice(&p.id.to_le_bytes());
        p.xyz.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        b.extend_from_slice(&p.rgb);
        b.extend_from_slice(&p.error.to_le_bytes());
        b.extend_from_slice(&(p.track.len() as u64).to_le_bytes());
        for (i, k) in &p.track {
            b.extend_from_slice(&i.to_le_bytes());
            b.extend_from_slice(&k.to_le_bytes());
        }
    }
    write_file(dir.join("points3D.bin"), &b)
}

/// Builds a model from posed pinhole cameras, one COLMAP camera per view.
pub fn model_from_views(views: &[PosedView], points: &[(Vector3<f64>, [u8; 3])]) -> ColmapModel {
    let mut model = ColmapModel::default();
    for (i, v) in views.iter().enumerate() {
        let id = i as u32 + 1;
        let c = &v.camera;
        model.cameras.insert(
            id,
            ColmapCamera {
                id,
                model: "PINHOLE".into(),
                width: c.width as u64,
                height: c.height as u64,
                params: vec![c.fx, c.fy, c.cx, c.cy],
            },
        );
        let q = UnitQuaternion::from_matrix(&c.rotation);
        model.images.insert(
            id,
            ColmapImage {
                id,
                qvec: [q.w, q.i, q.j, q.k],
                tvec: [c.translation.x, c.translation.y, c.translation.z],
                camera_id: id,
                name: v.name.clone(),
                points2d: Vec::new(),
            },
        );
    }
    model.points = points
        .iter()
        .enumerate()
        .map(|(i, (p, rgb))| ColmapPoint {
            id: i as u64 + 1,
            xyz: [p.x, p.y, p.z],
            rgb: *rgb,
            error: 0.0,
            track: Vec::new(),
        })
        .collect();
    model
}
