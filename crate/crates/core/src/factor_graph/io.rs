//! Line-oriented text format for factor graphs.
//!
//! ```text
//! CAMERA fx fy cx cy width height  tx ty tz qx qy qz qw
//! POSE3 id  tx ty tz  qx qy qz qw
//! LANDMARK id class  x y z
//! ODOM id_from id_to  dtx dty dtz  qx qy qz qw  <21 upper-triangular info entries>
//! OBS pose_id lm_id  u v  i11 i12 i22
//! PRIOR pose_id <21 upper-triangular info entries>
//! ```
//!
//! Information matrices are ordered (rotation, translation). A `PRIOR`
//! holds its pose at the estimate given by the preceding `POSE3` record.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix6, Vector2, Vector3};

use super::{CameraModel, FactorGraph, Landmark, ObservationFactor, OdometryFactor, PriorFactor};
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

struct Fields<'a> {
    line: usize,
    tokens: std::slice::Iter<'a, &'a str>,
}

impl<'a> Fields<'a> {
    fn next_str(&mut self) -> Result<&'a str> {
        self.tokens
            .next()
            .copied()
            .ok_or_else(|| parse_err(self.line, "missing field"))
    }

    fn f64(&mut self) -> Result<f64> {
        let s = self.next_str()?;
        s.parse::<f64>()
            .map_err(|_| parse_err(self.line, format!("invalid number '{s}'")))
    }

    fn usize(&mut self) -> Result<usize> {
        let s = self.next_str()?;
        s.parse::<usize>()
            .map_err(|_| parse_err(self.line, format!("invalid id '{s}'")))
    }

    fn transform(&mut self) -> Result<RigidTransform> {
        let t = Vector3::new(self.f64()?, self.f64()?, self.f64()?);
        let (x, y, z, w) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let norm = (x * x + y * y + z * z + w * w).sqrt();
        if !(norm > 1e-12) {
            return Err(parse_err(self.line, "zero quaternion"));
        }
        Ok(RigidTransform::new(Rotation::from_xyzw(x, y, z, w), t))
    }

    fn info6(&mut self) -> Result<Matrix6<f64>> {
        let mut m = Matrix6::zeros();
        for r in 0..6 {
            for c in r..6 {
                let v = self.f64()?;
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        Ok(m)
    }

    fn finish(&mut self) -> Result<()> {
        match self.tokens.next() {
            None => Ok(()),
            Some(extra) => Err(parse_err(self.line, format!("unexpected trailing field '{extra}'"))),
        }
    }
}

fn scoped(line: usize, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Parse { .. } => e,
        other => parse_err(line, other.to_string()),
    })
}

pub fn parse_graph(text: &str) -> Result<FactorGraph> {
    let mut graph: Option<FactorGraph> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&tag, rest)) = tokens.split_first() else {
            continue;
        };
        let mut f = Fields {
            line,
            tokens: rest.iter(),
        };
        if tag == "CAMERA" {
            if graph.is_some() {
                return Err(parse_err(line, "duplicate CAMERA record"));
            }
            let (fx, fy, cx, cy, width, height) = (f.f64()?, f.f64()?, f.f64()?, f.f64()?, f.f64()?, f.f64()?);
            let body_to_camera = f.transform()?;
            f.finish()?;
            if !(fx > 0.0 && fy > 0.0) {
                return Err(parse_err(line, "focal lengths must be positive"));
            }
            graph = Some(FactorGraph::new(CameraModel {
                fx,
                fy,
                cx,
                cy,
                width,
                height,
                body_to_camera,
            }));
            continue;
        }
        let g = graph
            .as_mut()
            .ok_or_else(|| parse_err(line, "CAMERA record must come first"))?;
        match tag {
            "POSE3" => {
                let id = f.usize()?;
                let t = f.transform()?;
                f.finish()?;
                scoped(line, g.add_pose(id, t))?;
            }
            "LANDMARK" => {
                let id = f.usize()?;
                let class = f.next_str()?;
                let class_label = class
                    .parse::<u32>()
                    .map_err(|_| parse_err(line, format!("invalid class '{class}'")))?;
                let position = Vector3::new(f.f64()?, f.f64()?, f.f64()?);
                f.finish()?;
                scoped(
                    line,
                    g.add_landmark(
                        id,
                        Landmark {
                            position,
                            class_label,
                        },
                    ),
                )?;
            }
            "ODOM" => {
                let (from, to) = (f.usize()?, f.usize()?);
                let measured = f.transform()?;
                let information = f.info6()?;
                f.finish()?;
                scoped(
                    line,
                    g.add_odometry(OdometryFactor {
                        from,
                        to,
                        measured,
                        information,
                    }),
                )?;
            }
            "OBS" => {
                let (pose, landmark) = (f.usize()?, f.usize()?);
                let pixel = Vector2::new(f.f64()?, f.f64()?);
                let (i11, i12, i22) = (f.f64()?, f.f64()?, f.f64()?);
                f.finish()?;
                scoped(
                    line,
                    g.add_observation(ObservationFactor {
                        pose,
                        landmark,
                        pixel,
                        information: Matrix2::new(i11, i12, i12, i22),
                    }),
                )?;
            }
            "PRIOR" => {
                let pose = f.usize()?;
                let information = f.info6()?;
                f.finish()?;
                let mean = match g.pose(pose) {
                    Ok(p) => *p,
                    Err(e) => return Err(parse_err(line, e.to_string())),
                };
                scoped(
                    line,
                    g.add_prior(PriorFactor {
                        pose,
                        mean,
                        information,
                    }),
                )?;
            }
            other => return Err(parse_err(line, format!("unknown record type '{other}'"))),
        }
    }
    let graph = graph.ok_or_else(|| parse_err(0, "missing CAMERA record"))?;
    graph.validate().map_err(|e| parse_err(0, e.to_string()))?;
    Ok(graph)
}

fn push_transform(out: &mut String, t: &RigidTransform) {
    let q = t.rotation.xyzw();
    let _ = write!(
        out,
        " {} {} {} {} {} {} {}",
        t.translation.x, t.translation.y, t.translation.z, q[0], q[1], q[2], q[3]
    );
}

fn push_info6(out: &mut String, m: &Matrix6<f64>) {
    for r in 0..6 {
        for c in r..6 {
            let _ = write!(out, " {}", m[(r, c)]);
        }
    }
}

pub fn write_graph(graph: &FactorGraph) -> String {
    let mut out = String::new();
    let c = &graph.camera;
    let _ = write!(out, "CAMERA {} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
    push_transform(&mut out, &c.body_to_camera);
    out.push('\n');
    for (id, t) in graph.poses() {
        let _ = write!(out, "POSE3 {id}");
        push_transform(&mut out, t);
        out.push('\n');
    }
    for (id, l) in graph.landmarks() {
        let _ = writeln!(
            out,
            "LANDMARK {id} {} {} {} {}",
            l.class_label, l.position.x, l.position.y, l.position.z
        );
    }
    for p in graph.priors() {
        let _ = write!(out, "PRIOR {}", p.pose);
        push_info6(&mut out, &p.information);
        out.push('\n');
    }
    for o in graph.odometry() {
        let _ = write!(out, "ODOM {} {}", o.from, o.to);
        push_transform(&mut out, &o.measured);
        push_info6(&mut out, &o.information);
        out.push('\n');
    }
    for o in graph.observations() {
        let i = &o.information;
        let _ = writeln!(
            out,
            "OBS {} {} {} {} {} {} {}",
            o.pose,
            o.landmark,
            o.pixel.x,
            o.pixel.y,
            i[(0, 0)],
            i[(0, 1)],
            i[(1, 1)]
        );
    }
    out
}

pub fn read_graph_file(path: &Path) -> Result<FactorGraph> {
    parse_graph(&std::fs::read_to_string(path)?)
}

pub fn write_graph_file(path: &Path, graph: &FactorGraph) -> Result<()> {
    std::fs::write(path, write_graph(graph))?;
    Ok(())
}
