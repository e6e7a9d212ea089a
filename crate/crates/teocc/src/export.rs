//! ASCII point-cloud export of occupied voxels.
//!
//! Header `teocc-voxels v1 count=<n>`, then one `x y z class_id r g b`
//! line per non-free voxel, in flat-index order.

use std::fmt::Write as _;
use std::path::Path;

use teocc_core::OccupancyLabelGrid;

use crate::error::{io_err, parse_err, Result};

pub const HEADER_PREFIX: &str = "teocc-voxels v1 count=";

/// Colors for class ids 0..=5 of the desk label set; other ids are grey.
pub const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [128, 96, 64], [160, 160, 200], [255, 140, 0], [30, 144, 255], [220, 20, 60]];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE.get(class as usize).copied().unwrap_or([128, 128, 128])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelRecord {
    pub center: [f64; 3],
    pub class: u8,
    pub color: [u8; 3],
}

pub fn voxel_records(grid: &OccupancyLabelGrid) -> Vec<VoxelRecord> {
    grid.labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, &l)| VoxelRecord { center: grid.spec.voxel_center(grid.spec.unflatten(i)), class: l, color: class_color(l) })
        .collect()
}

pub fn format_voxels(grid: &OccupancyLabelGrid) -> String {
    let recs = voxel_records(grid);
    let mut out = format!("{}{}\n", HEADER_PREFIX, recs.len());
    for r in &recs {
        let [x, y, z] = r.center;
        let [cr, cg, cb] = r.color;
        writeln!(out, "{} {} {} {} {} {} {}", x, y, z, r.class, cr, cg, cb).unwrap();
    }
    out
}

pub fn export_voxels(grid: &OccupancyLabelGrid, path: &Path) -> Result<()> {
    std::fs::write(path, format_voxels(grid)).map_err(io_err(path))
}

pub fn parse_voxels(text: &str, path: &Path) -> Result<Vec<VoxelRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "header", "empty file"))?;
    let count: usize = header
        .strip_prefix(HEADER_PREFIX)
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| parse_err(path, "header", format!("expected `{}<n>`, found `{}`", HEADER_PREFIX, header)))?;
    let recs = lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let field = format!("line {}", i + 2);
            if f.len() != 7 {
                return Err(parse_err(path, field, format!("expected 7 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(path, field.clone(), e));
            let byte = |s: &str| s.parse::<u8>().map_err(|e| parse_err(path, field.clone(), e));
            Ok(VoxelRecord {
                center: [num(f[0])?, num(f[1])?, num(f[2])?],
                class: byte(f[3])?,
                color: [byte(f[4])?, byte(f[5])?, byte(f[6])?],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if recs.len() != count {
        return Err(parse_err(path, "count", format!("header says {}, found {} records", count, recs.len())));
    }
    Ok(recs)
}

pub fn read_voxels(path: &Path) -> Result<Vec<VoxelRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_voxels(&text, path)
}
