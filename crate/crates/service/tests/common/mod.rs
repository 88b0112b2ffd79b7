#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};

use organoid_core::pipeline::{self, PipelineConfig, MEASUREMENTS_CSV};
use organoid_core::reporting::{read_measurements_csv, write_measurements_csv};
use organoid_core::synth::{write_slide, SlideSpec};

pub fn spec(slide: &str, group: &str, radius: f64, seed: u64) -> SlideSpec {
    SlideSpec {
        slide_id: slide.into(),
        group_label: group.into(),
        tiles_x: 2,
        tiles_y: 1,
        tile_size: 120,
        mean_radius: radius,
        radius_jitter: 2.0,
        seed,
    }
}

/// A completed run of one synthetic slide; returns the output directory.
pub fn run_dir(root: &Path, s: &SlideSpec) -> PathBuf {
    let slide = root.join(format!("slide-{}", s.slide_id));
    write_slide(s, &slide).unwrap();
    let out = root.join(format!("out-{}", s.slide_id));
    pipeline::run(
        &slide.join("manifest.json"),
        &out,
        &PipelineConfig::default(),
    )
    .unwrap();
    out
}

/// A run directory whose measurements also hold the rows of a second group,
/// with ids prefixed so they stay unique.
pub fn two_group_dir(root: &Path) -> PathBuf {
    let out = run_dir(root, &spec("a", "small", 8.0, 21));
    let other = run_dir(root, &spec("b", "large", 13.0, 22));
    let mut rows = read_measurements_csv(&out.join(MEASUREMENTS_CSV)).unwrap();
    for mut r in read_measurements_csv(&other.join(MEASUREMENTS_CSV)).unwrap() {
        r.global_id = format!("b/{}", r.global_id);
        rows.push(r);
    }
    write_measurements_csv(&rows, &out.join(MEASUREMENTS_CSV)).unwrap();
    out
}

pub struct Reply {
    pub status: u16,
    pub headers: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

/// Minimal HTTP/1.1 client: one request per connection.
pub fn request(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> Reply {
    let mut s = TcpStream::connect(addr).unwrap();
    let body = body.unwrap_or("");
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .expect("header end");
    let headers = String::from_utf8_lossy(&raw[..split]).into_owned();
    let status = headers.split_whitespace().nth(1).unwrap().parse().unwrap();
    let mut body = raw[split + 4..].to_vec();
    if headers
        .to_ascii_lowercase()
        .contains("transfer-encoding: chunked")
    {
        body = dechunk(&body);
    }
    Reply {
        status,
        headers,
        body,
    }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size =
            usize::from_str_radix(std::str::from_utf8(&data[..line_end]).unwrap().trim(), 16)
                .unwrap();
        data = &data[line_end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}
