//! Small planar geometry helpers shared by the generator, tiling and
//! heatmap code. Coordinates are level-0 pixels.

/// Axis-aligned rectangle, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn from_origin(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(vertices: &[[i64; 2]], x: f64, y: f64) -> bool {
    let n = vertices.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (vertices[i][0] as f64, vertices[i][1] as f64);
        let (xj, yj) = (vertices[j][0] as f64, vertices[j][1] as f64);
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Bounding box of a polygon as integer extremes `(min_x, min_y, max_x, max_y)`.
pub fn bounding_box(vertices: &[[i64; 2]]) -> (i64, i64, i64, i64) {
    let mut b = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for v in vertices {
        b.0 = b.0.min(v[0]);
        b.1 = b.1.min(v[1]);
        b.2 = b.2.max(v[0]);
        b.3 = b.3.max(v[1]);
    }
    b
}

fn orientation(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Whether a polygon and a rectangle share any point (closed semantics on
/// the rectangle: its boundary counts).
pub fn polygon_intersects_rect(vertices: &[[i64; 2]], rect: &Rect) -> bool {
    let closed = |x: f64, y: f64| x >= rect.x0 && x <= rect.x1 && y >= rect.y0 && y <= rect.y1;
    if vertices.iter().any(|v| closed(v[0] as f64, v[1] as f64)) {
        return true;
    }
    let corners = [
        (rect.x0, rect.y0),
        (rect.x1, rect.y0),
        (rect.x1, rect.y1),
        (rect.x0, rect.y1),
    ];
    if corners.iter().any(|&(x, y)| point_in_polygon(vertices, x, y)) {
        return true;
    }
    let n = vertices.len();
    for i in 0..n {
        let a = (vertices[i][0] as f64, vertices[i][1] as f64);
        let b = (
            vertices[(i + 1) % n][0] as f64,
            vertices[(i + 1) % n][1] as f64,
        );
        for k in 0..4 {
            if segments_intersect(a, b, corners[k], corners[(k + 1) % 4]) {
                return true;
            }
        }
    }
    false
}

/// Pixel-centre membership: pixel `(x, y)` belongs to the polygon when its
/// centre `(x + 0.5, y + 0.5)` is inside.
pub fn pixel_in_polygon(vertices: &[[i64; 2]], x: u32, y: u32) -> bool {
    point_in_polygon(vertices, x as f64 + 0.5, y as f64 + 0.5)
}
