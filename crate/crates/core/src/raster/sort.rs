use std::ops::Range;

use super::Splat2D;

/// Square tiles covering the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub width: u32,
    pub height: u32,
}

impl TileGrid {
    pub fn new(width: u32, height: u32, tile_size: u32) -> Self {
        assert!(tile_size > 0, "tile size must be positive");
        TileGrid {
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
            width,
            height,
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x as usize * self.tiles_y as usize
    }

    /// Pixel rectangle `(u0, v0, u1, v1)` (exclusive upper bounds) of a tile.
    pub fn tile_pixels(&self, tile_id: u32) -> (u32, u32, u32, u32) {
        let tx = tile_id % self.tiles_x;
        let ty = tile_id / self.tiles_x;
        let u0 = tx * self.tile_size;
        let v0 = ty * self.tile_size;
        (
            u0,
            v0,
            (u0 + self.tile_size).min(self.width),
            (v0 + self.tile_size).min(self.height),
        )
    }

    /// Inclusive tile rectangle overlapped by a splat's footprint.
    pub fn tile_rect(&self, s: &Splat2D) -> (u32, u32, u32, u32) {
        (
            s.pixel_min[0] / self.tile_size,
            s.pixel_min[1] / self.tile_size,
            s.pixel_max[0] / self.tile_size,
            s.pixel_max[1] / self.tile_size,
        )
    }
}

/// One splat-tile overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileKey {
    pub tile_id: u32,
    pub depth: f64,
    /// Index into the splat list the keys were built from.
    pub splat: u32,
}

impl TileKey {
    /// Tile id in the high 64 bits, order-preserving depth bits in the low 64.
    pub fn packed(&self) -> u128 {
        ((self.tile_id as u128) << 64) | depth_bits(self.depth) as u128
    }
}

/// Maps an `f64` to a `u64` whose unsigned order matches the float's total order.
pub fn depth_bits(d: f64) -> u64 {
    let bits = d.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Emits one key per splat-tile overlap and radix-sorts them by `(tile_id, depth)`.
/// The sort is stable: equal keys keep splat order.
pub fn sort_splats(splats: &[Splat2D], grid: &TileGrid) -> Vec<TileKey> {
    let mut keys = Vec::new();
    for (i, s) in splats.iter().enumerate() {
        let (tx0, ty0, tx1, ty1) = grid.tile_rect(s);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                keys.push(TileKey {
                    tile_id: ty * grid.tiles_x + tx,
                    depth: s.depth,
                    splat: i as u32,
                });
            }
        }
    }
    let tile_bits = u32::BITS - (grid.tile_count().max(1) as u32 - 1).leading_zeros();
    radix_sort(&mut keys, 64 + tile_bits.max(1));
    keys
}

/// LSD radix sort on the packed key, one byte per pass.
fn radix_sort(keys: &mut Vec<TileKey>, key_bits: u32) {
    if keys.len() < 2 {
        return;
    }
    let mut packed: Vec<(u128, TileKey)> = keys.iter().map(|k| (k.packed(), *k)).collect();
    let mut scratch = packed.clone();
    let passes = key_bits.div_ceil(8);
    for pass in 0..passes {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for (p, _) in &packed {
            counts[((p >> shift) & 0xff) as usize] += 1;
        }
        if counts.iter().any(|&c| c == packed.len()) {
            continue;
        }
        let mut offset = 0;
        for c in counts.iter_mut() {
            let n = *c;
            *c = offset;
            offset += n;
        }
        for item in &packed {
            let digit = ((item.0 >> shift) & 0xff) as usize;
            scratch[counts[digit]] = *item;
            counts[digit] += 1;
        }
        std::mem::swap(&mut packed, &mut scratch);
    }
    keys.clear();
    keys.extend(packed.into_iter().map(|(_, k)| k));
}

/// Range of sorted keys belonging to each tile.
pub fn tile_ranges(keys: &[TileKey], grid: &TileGrid) -> Vec<Range<usize>> {
    let mut ranges = vec![0..0; grid.tile_count()];
    let mut start = 0;
    while start < keys.len() {
        let tile = keys[start].tile_id;
        let mut end = start + 1;
        while end < keys.len() && keys[end].tile_id == tile {
            end += 1;
        }
        ranges[tile as usize] = start..end;
        start = end;
    }
    ranges
}
