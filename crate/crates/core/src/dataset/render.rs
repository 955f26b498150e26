//! Scene rendering: station textures, modality styles, orientation.
//!
//! A scene is a deterministic function of its `SceneSpec`: background texture
//! keyed by station, organ glyphs placed in fixed non-overlapping slots,
//! modality-dependent intensity levels and noise, then an orientation
//! permutation. Rendering the same spec twice yields bitwise-identical
//! pixels at any thread count because the only randomness is a ChaCha stream
//! derived from the spec's own noise seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::glyphs;
use super::SceneSpec;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labels::{Modality, MR_PROTOCOLS, ORIENTATIONS, STATIONS};
use crate::rng::derive_rng;

// ── station textures ──

/// Signed texture field in [-1, 1] on normalized coordinates centered at the
/// origin. Patterns are chosen so their local statistics survive rotation:
/// rings, dots, checker, spokes, and a radial ramp remain recognizable under
/// the orientation permutations and the rotation augment.
fn texture_field(station: &str, u: f32, v: f32) -> Result<f32> {
    let rho = (u * u + v * v).sqrt();
    Ok(match station {
        "head" => (rho * 6.0 * std::f32::consts::TAU).sin(),
        "chest" => {
            // Dot lattice: distance to the nearest grid point of spacing 1/8.
            let s = 8.0;
            let du = (u * s).round() / s - u;
            let dv = (v * s).round() / s - v;
            if (du * du + dv * dv).sqrt() < 0.042 {
                1.0
            } else {
                -0.4
            }
        }
        "abdomen" => {
            let w = (u * 4.0 * std::f32::consts::TAU).sin() * (v * 4.0 * std::f32::consts::TAU).sin();
            if w >= 0.0 {
                0.8
            } else {
                -0.8
            }
        }
        "pelvis" => (8.0 * v.atan2(u)).sin(),
        "lower body" => (rho / 0.3536 - 1.0).clamp(-1.0, 1.0),
        other => return Err(Error::Data(format!("unknown station {other:?}"))),
    })
}

// ── modality styles ──

/// Intensity recipe for one modality/protocol combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    /// Base level inside organ glyphs.
    pub glyph_level: f32,
    /// Base level of the background.
    pub bg_level: f32,
    /// Amplitude of the station texture modulation.
    pub texture_amp: f32,
    /// Amplitude of the stochastic noise.
    pub noise_amp: f32,
    /// Smooth (spatially correlated) noise instead of per-pixel noise.
    pub smooth_noise: bool,
}

/// Looks up the style for a modality, enforcing the protocol contract:
/// MR requires a known protocol, CT forbids one.
pub fn style_for(modality: Modality, protocol: Option<&str>) -> Result<Style> {
    match (modality, protocol) {
        (Modality::Ct, None) => Ok(Style {
            // High-contrast bimodal: bright structures on a dark field.
            glyph_level: 0.85,
            bg_level: 0.15,
            texture_amp: 0.06,
            noise_amp: 0.04,
            smooth_noise: false,
        }),
        (Modality::Ct, Some(p)) => Err(Error::Data(format!("CT scene carries protocol {p:?}"))),
        (Modality::Mr, None) => Err(Error::Data("MR scene missing protocol".into())),
        (Modality::Mr, Some(p)) => {
            // Protocol-dependent weighting; T1 and T2 invert the glyph vs
            // background ordering, mirroring how tissue contrast flips.
            let (glyph_level, bg_level) = match p {
                "T1" => (0.75, 0.40),
                "T2" => (0.30, 0.70),
                "FLAIR" => (0.85, 0.30),
                "DWI" => (0.90, 0.15),
                "ADC" => (0.25, 0.65),
                "STIR" => (0.60, 0.20),
                other => return Err(Error::Data(format!("unknown MR protocol {other:?}"))),
            };
            Ok(Style {
                glyph_level,
                bg_level,
                texture_amp: 0.05,
                noise_amp: 0.03,
                smooth_noise: true,
            })
        }
    }
}

// ── layout ──

/// Glyph slots for a scene with `k` organs: (row center, col center, scale),
/// all as fractions of the image side. Slots are disjoint by construction and
/// every glyph stays clear of its slot border in canonical pose, so placement
/// never collides and never clips.
fn layout(k: usize) -> Result<Vec<(f32, f32, f32)>> {
    Ok(match k {
        1 => vec![(0.5, 0.5, 0.82)],
        2 => vec![(0.5, 0.27, 0.46), (0.5, 0.73, 0.46)],
        3 => vec![(0.28, 0.27, 0.44), (0.28, 0.73, 0.44), (0.72, 0.5, 0.44)],
        other => {
            return Err(Error::Data(format!(
                "scene holds {other} organs, expected 1 to 3"
            )))
        }
    })
}

// ── orientation ──

/// Applies the orientation permutation to a square buffer.
/// axial: identity; coronal: rotate 90 degrees clockwise; sagittal:
/// transpose followed by a vertical flip (a 90 degree counter-rotation).
fn orient_buffer<T: Copy>(orientation: &str, size: usize, buf: &[T]) -> Result<Vec<T>> {
    let at = |r: usize, c: usize| buf[r * size + c];
    let mut out = Vec::with_capacity(size * size);
    match orientation {
        "axial" => out.extend_from_slice(buf),
        "coronal" => {
            for r in 0..size {
                for c in 0..size {
                    out.push(at(size - 1 - c, r));
                }
            }
        }
        "sagittal" => {
            for r in 0..size {
                for c in 0..size {
                    out.push(at(c, size - 1 - r));
                }
            }
        }
        other => return Err(Error::Data(format!("unknown orientation {other:?}"))),
    }
    Ok(out)
}

// ── scene rendering ──

/// Renders a scene and also returns the organ mask (true where any glyph
/// landed, after orientation). The mask is what style tests and area checks
/// measure against.
pub fn render_scene_parts(spec: &SceneSpec, size: usize) -> Result<(GrayImage, Vec<bool>)> {
    if !STATIONS.contains(&spec.station.as_str()) {
        return Err(Error::Data(format!("unknown station {:?}", spec.station)));
    }
    if !ORIENTATIONS.contains(&spec.orientation.as_str()) {
        return Err(Error::Data(format!(
            "unknown orientation {:?}",
            spec.orientation
        )));
    }
    if let Some(p) = spec.protocol.as_deref() {
        if !MR_PROTOCOLS.contains(&p) {
            return Err(Error::Data(format!("unknown MR protocol {p:?}")));
        }
    }
    for (i, organ) in spec.organs.iter().enumerate() {
        if spec.organs[..i].contains(organ) {
            return Err(Error::Data(format!("duplicate organ {organ:?} in scene")));
        }
    }
    let style = style_for(spec.modality, spec.protocol.as_deref())?;
    let slots = layout(spec.organs.len())?;
    let shapes: Vec<fn(f32, f32) -> bool> = spec
        .organs
        .iter()
        .map(|o| {
            glyphs::glyph(o).ok_or_else(|| Error::Data(format!("unknown organ glyph {o:?}")))
        })
        .collect::<Result<_>>()?;

    let inv = 1.0 / size as f32;
    let mut pixels = vec![0.0f32; size * size];
    let mut mask = vec![false; size * size];
    for r in 0..size {
        let y = (r as f32 + 0.5) * inv;
        for c in 0..size {
            let x = (c as f32 + 0.5) * inv;
            let tex = texture_field(&spec.station, x - 0.5, y - 0.5)?;
            let mut val = style.bg_level + style.texture_amp * tex;
            for (shape, &(crow, ccol, scale)) in shapes.iter().zip(&slots) {
                let gu = (x - ccol) / scale;
                let gv = (y - crow) / scale;
                if gu.abs() <= 0.5 && gv.abs() <= 0.5 && shape(gu, gv) {
                    // Glyph interior keeps a faint echo of the texture so it
                    // does not read as a flat sticker.
                    val = style.glyph_level + 0.5 * style.texture_amp * tex;
                    mask[r * size + c] = true;
                    break;
                }
            }
            pixels[r * size + c] = val;
        }
    }

    add_noise(&mut pixels, size, &style, spec.noise_seed);
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let pixels = orient_buffer(&spec.orientation, size, &pixels)?;
    let mask = orient_buffer(&spec.orientation, size, &mask)?;
    Ok((GrayImage::new(size, size, pixels)?, mask))
}

/// Renders a scene to an image. See `render_scene_parts`.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<GrayImage> {
    render_scene_parts(spec, size).map(|(img, _)| img)
}

/// CT gets independent per-pixel uniform noise; MR gets a Gaussian field
/// sampled on a coarse grid and bilinearly upsampled, which reads as the
/// smoother mottle of an MR acquisition.
fn add_noise(pixels: &mut [f32], size: usize, style: &Style, noise_seed: u64) {
    let mut rng = derive_rng(noise_seed, &[]);
    if style.noise_amp == 0.0 {
        return;
    }
    if !style.smooth_noise {
        for p in pixels.iter_mut() {
            *p += rng.random_range(-style.noise_amp..=style.noise_amp);
        }
        return;
    }
    const BLOCK: usize = 4;
    let nb = size.div_ceil(BLOCK) + 1;
    let normal = Normal::new(0.0f32, style.noise_amp).expect("positive std");
    let coarse: Vec<f32> = (0..nb * nb).map(|_| normal.sample(&mut rng)).collect();
    for r in 0..size {
        let fr = r as f32 / BLOCK as f32;
        let ir = fr.floor() as usize;
        let tr = fr - ir as f32;
        for c in 0..size {
            let fc = c as f32 / BLOCK as f32;
            let ic = fc.floor() as usize;
            let tc = fc - ic as f32;
            let g = |rr: usize, cc: usize| coarse[rr * nb + cc];
            let top = g(ir, ic) * (1.0 - tc) + g(ir, ic + 1) * tc;
            let bot = g(ir + 1, ic) * (1.0 - tc) + g(ir + 1, ic + 1) * tc;
            pixels[r * size + c] += top * (1.0 - tr) + bot * tr;
        }
    }
}
