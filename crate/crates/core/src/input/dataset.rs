//! Line-oriented dataset files.
//!
//! One record per line, fields separated by tabs, first field the record kind:
//!
//! ```text
//! pair    <image> <caption>
//! image   <image>
//! text    <text>
//! vqa     <image> <question> <answer id>
//! nlvr    <image> <image> <statement> <0|1>
//! imgcls  <image> <label>
//! ```
//!
//! An image is `"h w c "` followed by `h·w·c` bytes in lowercase hex, one byte
//! per pixel channel (`round(255·p)`), row-major `(y, x, c)`.

use std::io::{BufRead, Write};

use super::image::RawImage;
use super::synthetic::Sample;
use crate::error::{Error, Result};

pub fn encode_image(img: &RawImage) -> String {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    format!("{} {} {} {}", img.height, img.width, img.channels, hex::encode(bytes))
}

pub fn decode_image(s: &str) -> Result<RawImage> {
    let mut it = s.splitn(4, ' ');
    let mut dim = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad image {what}")))
    };
    let (h, w, c) = (dim("height")?, dim("width")?, dim("channels")?);
    let body = it.next().ok_or_else(|| Error::Format("missing pixel data".into()))?;
    let bytes = hex::decode(body).map_err(|e| Error::Format(format!("pixel data: {e}")))?;
    if bytes.len() != h * w * c {
        return Err(Error::Format(format!(
            "image header {h} {w} {c} needs {} bytes, found {}",
            h * w * c,
            bytes.len()
        )));
    }
    RawImage::new(h, w, c, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
}

fn check_text(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("text field contains a tab or newline: {s:?}")));
    }
    Ok(s)
}

pub fn encode_sample(s: &Sample) -> Result<String> {
    Ok(match s {
        Sample::Pair { image, caption } => format!("pair\t{}\t{}", encode_image(image), check_text(caption)?),
        Sample::Image { image } => format!("image\t{}", encode_image(image)),
        Sample::Text { text } => format!("text\t{}", check_text(text)?),
        Sample::Vqa {
            image,
            question,
            answer,
        } => format!("vqa\t{}\t{}\t{answer}", encode_image(image), check_text(question)?),
        Sample::Nlvr {
            left,
            right,
            statement,
            label,
        } => format!(
            "nlvr\t{}\t{}\t{}\t{}",
            encode_image(left),
            encode_image(right),
            check_text(statement)?,
            u8::from(*label)
        ),
        Sample::ImgCls { image, label } => format!("imgcls\t{}\t{label}", encode_image(image)),
    })
}

fn parse_index(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad integer field {s:?}")))
}

pub fn decode_sample(line: &str) -> Result<Sample> {
    let f: Vec<&str> = line.split('\t').collect();
    let want = |n: usize| -> Result<()> {
        if f.len() == n {
            Ok(())
        } else {
            Err(Error::Format(format!("{} record needs {n} fields, found {}", f[0], f.len())))
        }
    };
    match f[0] {
        "pair" => {
            want(3)?;
            Ok(Sample::Pair {
                image: decode_image(f[1])?,
                caption: f[2].to_string(),
            })
        }
        "image" => {
            want(2)?;
            Ok(Sample::Image {
                image: decode_image(f[1])?,
            })
        }
        "text" => {
            want(2)?;
            Ok(Sample::Text { text: f[1].to_string() })
        }
        "vqa" => {
            want(4)?;
            Ok(Sample::Vqa {
                image: decode_image(f[1])?,
                question: f[2].to_string(),
                answer: parse_index(f[3])?,
            })
        }
        "nlvr" => {
            want(5)?;
            let label = match f[4] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("bad nlvr label {other:?}"))),
            };
            Ok(Sample::Nlvr {
                left: decode_image(f[1])?,
                right: decode_image(f[2])?,
                statement: f[3].to_string(),
                label,
            })
        }
        "imgcls" => {
            want(3)?;
            Ok(Sample::ImgCls {
                image: decode_image(f[1])?,
                label: parse_index(f[2])?,
            })
        }
        other => Err(Error::Format(format!("unknown record kind {other:?}"))),
    }
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(w, "{}", encode_sample(s)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record; errors carry the 1-based line number.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(decode_sample(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
