//! Baseline TIFF 6.0 + GeoTIFF codec for uncompressed strip rasters.

use super::{auto_stretch, BandPlane, GeoTransform, RasterError, RasterGrid, Result, SampleType};

const IMAGE_WIDTH: u16 = 256;
const IMAGE_LENGTH: u16 = 257;
const BITS_PER_SAMPLE: u16 = 258;
const COMPRESSION: u16 = 259;
const PHOTOMETRIC: u16 = 262;
const STRIP_OFFSETS: u16 = 273;
const SAMPLES_PER_PIXEL: u16 = 277;
const ROWS_PER_STRIP: u16 = 278;
const STRIP_BYTE_COUNTS: u16 = 279;
const PLANAR_CONFIGURATION: u16 = 284;
const TILE_WIDTH: u16 = 322;
const TILE_OFFSETS: u16 = 324;
const EXTRA_SAMPLES: u16 = 338;
const SAMPLE_FORMAT: u16 = 339;
const MODEL_PIXEL_SCALE: u16 = 33550;
const MODEL_TIEPOINT: u16 = 33922;
const GEO_KEY_DIRECTORY: u16 = 34735;
const GDAL_NODATA: u16 = 42113;

const TYPE_BYTE: u16 = 1;
const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_DOUBLE: u16 = 12;

const TARGET_STRIP_BYTES: usize = 8192;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl<'a> Reader<'a> {
    fn slice(&self, offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
        offset
            .checked_add(len)
            .and_then(|end| self.bytes.get(offset..end))
            .ok_or_else(|| {
                RasterError::MalformedTiff(format!(
                    "{what} at offset {offset} (+{len} bytes) exceeds file length {}",
                    self.bytes.len()
                ))
            })
    }

    fn u16_at(&self, offset: usize, what: &str) -> Result<u16> {
        let b: [u8; 2] = self.slice(offset, 2, what)?.try_into().unwrap();
        Ok(match self.endian {
            Endian::Little => u16::from_le_bytes(b),
            Endian::Big => u16::from_be_bytes(b),
        })
    }

    fn u32_at(&self, offset: usize, what: &str) -> Result<u32> {
        let b: [u8; 4] = self.slice(offset, 4, what)?.try_into().unwrap();
        Ok(match self.endian {
            Endian::Little => u32::from_le_bytes(b),
            Endian::Big => u32::from_be_bytes(b),
        })
    }

    fn u64_at(&self, offset: usize, what: &str) -> Result<u64> {
        let b: [u8; 8] = self.slice(offset, 8, what)?.try_into().unwrap();
        Ok(match self.endian {
            Endian::Little => u64::from_le_bytes(b),
            Endian::Big => u64::from_be_bytes(b),
        })
    }
}

struct Entry {
    tag: u16,
    field_type: u16,
    count: u32,
    value_offset: usize,
}

fn type_size(field_type: u16) -> Option<usize> {
    match field_type {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

struct Ifd<'a> {
    reader: Reader<'a>,
    entries: Vec<Entry>,
}

impl<'a> Ifd<'a> {
    fn parse(reader: Reader<'a>, offset: usize) -> Result<Self> {
        let n = reader.u16_at(offset, "IFD entry count")? as usize;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + 2 + i * 12;
            let tag = reader.u16_at(at, "IFD entry")?;
            let field_type = reader.u16_at(at + 2, "IFD entry")?;
            let count = reader.u32_at(at + 4, "IFD entry")?;
            let size = type_size(field_type).ok_or_else(|| {
                RasterError::MalformedTiff(format!("tag {tag} has unknown field type {field_type}"))
            })?;
            let total = size.checked_mul(count as usize).ok_or_else(|| {
                RasterError::MalformedTiff(format!("tag {tag} count {count} overflows"))
            })?;
            let value_offset = if total <= 4 {
                at + 8
            } else {
                reader.u32_at(at + 8, "IFD entry")? as usize
            };
            reader.slice(value_offset, total, &format!("values of tag {tag}"))?;
            entries.push(Entry {
                tag,
                field_type,
                count,
                value_offset,
            });
        }
        Ok(Ifd { reader, entries })
    }

    fn find(&self, tag: u16) -> Option<&Entry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    fn has(&self, tag: u16) -> bool {
        self.find(tag).is_some()
    }

    fn numbers(&self, tag: u16) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.find(tag) else {
            return Ok(None);
        };
        let r = &self.reader;
        let what = format!("tag {tag}");
        let mut out = Vec::with_capacity(e.count as usize);
        for i in 0..e.count as usize {
            let v = match e.field_type {
                TYPE_BYTE => r.slice(e.value_offset + i, 1, &what)?[0] as f64,
                TYPE_SHORT => r.u16_at(e.value_offset + 2 * i, &what)? as f64,
                TYPE_LONG => r.u32_at(e.value_offset + 4 * i, &what)? as f64,
                TYPE_DOUBLE => f64::from_bits(r.u64_at(e.value_offset + 8 * i, &what)?),
                other => {
                    return Err(RasterError::MalformedTiff(format!(
                        "tag {tag} has non-numeric field type {other}"
                    )))
                }
            };
            out.push(v);
        }
        Ok(Some(out))
    }

    fn required(&self, tag: u16, name: &str) -> Result<Vec<f64>> {
        match self.numbers(tag)? {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(RasterError::MalformedTiff(format!("missing required tag {tag} ({name})"))),
        }
    }

    fn ascii(&self, tag: u16) -> Result<Option<String>> {
        let Some(e) = self.find(tag) else {
            return Ok(None);
        };
        if e.field_type != TYPE_ASCII {
            return Err(RasterError::MalformedTiff(format!("tag {tag} is not ASCII")));
        }
        let raw = self.reader.slice(e.value_offset, e.count as usize, &format!("tag {tag}"))?;
        let text = raw.split(|&b| b == 0).next().unwrap_or_default();
        Ok(Some(String::from_utf8_lossy(text).trim().to_string()))
    }
}

fn single_value(values: &[f64], tag: u16, name: &str) -> Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => Err(RasterError::MalformedTiff(format!(
            "tag {tag} ({name}) must hold one value, found {}",
            values.len()
        ))),
    }
}

fn uniform(values: &[f64], samples: usize, tag: u16, name: &str) -> Result<f64> {
    let first = values[0];
    if values.iter().any(|&v| v != first) {
        return Err(RasterError::UnsupportedLayout(format!(
            "tag {tag} ({name}) differs between samples"
        )));
    }
    if values.len() != 1 && values.len() != samples {
        return Err(RasterError::MalformedTiff(format!(
            "tag {tag} ({name}) has {} values for {samples} samples",
            values.len()
        )));
    }
    Ok(first)
}

fn sample_type_for(bits: f64, format: f64) -> Result<SampleType> {
    match (bits as u32, format as u32) {
        (8, 1) => Ok(SampleType::Uint8),
        (8, 2) => Ok(SampleType::Int8),
        (16, 1) => Ok(SampleType::Uint16),
        (16, 2) => Ok(SampleType::Int16),
        (32, 3) => Ok(SampleType::Float32),
        (b, f) => Err(RasterError::UnsupportedLayout(format!(
            "tags 258/339: {b}-bit samples with sample format {f}"
        ))),
    }
}

fn bytes_per_sample(t: SampleType) -> usize {
    match t {
        SampleType::Int8 | SampleType::Uint8 | SampleType::Auto => 1,
        SampleType::Int16 | SampleType::Uint16 => 2,
        SampleType::Float32 => 4,
    }
}

fn read_sample(chunk: &[u8], t: SampleType, endian: Endian) -> f64 {
    macro_rules! num {
        ($ty:ty, $n:literal) => {{
            let b: [u8; $n] = chunk.try_into().unwrap();
            match endian {
                Endian::Little => <$ty>::from_le_bytes(b),
                Endian::Big => <$ty>::from_be_bytes(b),
            }
        }};
    }
    match t {
        SampleType::Uint8 | SampleType::Auto => chunk[0] as f64,
        SampleType::Int8 => chunk[0] as i8 as f64,
        SampleType::Uint16 => num!(u16, 2) as f64,
        SampleType::Int16 => num!(i16, 2) as f64,
        SampleType::Float32 => num!(f32, 4) as f64,
    }
}

/// Decodes an uncompressed, strip-organized GeoTIFF of either byte order.
pub fn decode_geotiff(bytes: &[u8]) -> Result<RasterGrid> {
    let endian = match bytes.get(0..2) {
        Some(b"II") => Endian::Little,
        Some(b"MM") => Endian::Big,
        _ => {
            return Err(RasterError::MalformedTiff(
                "bad byte-order mark at offset 0 (expected II or MM)".into(),
            ))
        }
    };
    let reader = Reader { bytes, endian };
    let magic = reader.u16_at(2, "magic number")?;
    if magic != 42 {
        return Err(RasterError::MalformedTiff(format!(
            "bad magic number {magic} at offset 2 (BigTIFF and non-TIFF input unsupported)"
        )));
    }
    let ifd_offset = reader.u32_at(4, "first IFD offset")? as usize;
    if ifd_offset < 8 {
        return Err(RasterError::MalformedTiff(format!("first IFD offset {ifd_offset} overlaps header")));
    }
    let ifd = Ifd::parse(reader, ifd_offset)?;

    if ifd.has(TILE_WIDTH) || ifd.has(TILE_OFFSETS) {
        return Err(RasterError::UnsupportedLayout("tiled image (tags 322/324)".into()));
    }
    if let Some(c) = ifd.numbers(COMPRESSION)? {
        let c = single_value(&c, COMPRESSION, "Compression")?;
        if c != 1.0 {
            return Err(RasterError::UnsupportedLayout(format!("tag 259 compression scheme {c}")));
        }
    }

    let width = single_value(&ifd.required(IMAGE_WIDTH, "ImageWidth")?, IMAGE_WIDTH, "ImageWidth")?;
    let height = single_value(&ifd.required(IMAGE_LENGTH, "ImageLength")?, IMAGE_LENGTH, "ImageLength")?;
    if width < 1.0 || height < 1.0 {
        return Err(RasterError::MalformedTiff(format!("tags 256/257: empty image {width}x{height}")));
    }
    let (width, height) = (width as u32, height as u32);
    let samples = match ifd.numbers(SAMPLES_PER_PIXEL)? {
        Some(v) => single_value(&v, SAMPLES_PER_PIXEL, "SamplesPerPixel")? as usize,
        None => 1,
    };
    if samples == 0 {
        return Err(RasterError::MalformedTiff("tag 277: zero samples per pixel".into()));
    }
    let bits = uniform(&ifd.required(BITS_PER_SAMPLE, "BitsPerSample")?, samples, BITS_PER_SAMPLE, "BitsPerSample")?;
    let format = match ifd.numbers(SAMPLE_FORMAT)? {
        Some(v) => uniform(&v, samples, SAMPLE_FORMAT, "SampleFormat")?,
        None => 1.0,
    };
    let sample_type = sample_type_for(bits, format)?;
    let planar = match ifd.numbers(PLANAR_CONFIGURATION)? {
        Some(v) => single_value(&v, PLANAR_CONFIGURATION, "PlanarConfiguration")? as u32,
        None => 1,
    };
    if planar != 1 && planar != 2 {
        return Err(RasterError::UnsupportedLayout(format!("tag 284 planar configuration {planar}")));
    }
    let rows_per_strip = match ifd.numbers(ROWS_PER_STRIP)? {
        Some(v) => (single_value(&v, ROWS_PER_STRIP, "RowsPerStrip")? as u64).clamp(1, height as u64) as usize,
        None => height as usize,
    };
    let offsets = ifd.required(STRIP_OFFSETS, "StripOffsets")?;
    let counts = ifd.required(STRIP_BYTE_COUNTS, "StripByteCounts")?;

    let bps = bytes_per_sample(sample_type);
    let (w, h) = (width as usize, height as usize);
    let strips_per_plane = h.div_ceil(rows_per_strip);
    let planes = if planar == 1 { 1 } else { samples };
    let expected_strips = strips_per_plane * planes;
    if offsets.len() != expected_strips || counts.len() != expected_strips {
        return Err(RasterError::MalformedTiff(format!(
            "tags 273/279 list {}/{} strips, expected {expected_strips}",
            offsets.len(),
            counts.len()
        )));
    }

    let payload = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(samples))
        .and_then(|n| n.checked_mul(bps))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| {
            RasterError::MalformedTiff(format!(
                "tags 256/257/277: {w}x{h}x{samples} image cannot fit in {} bytes",
                bytes.len()
            ))
        })?;
    let mut bands = vec![Vec::with_capacity(payload / bps / samples); samples];
    for plane in 0..planes {
        for s in 0..strips_per_plane {
            let idx = plane * strips_per_plane + s;
            let rows = rows_per_strip.min(h - s * rows_per_strip);
            let per_row = if planar == 1 { w * samples } else { w };
            let needed = rows * per_row * bps;
            if (counts[idx] as usize) < needed {
                return Err(RasterError::MalformedTiff(format!(
                    "tag 279: strip {idx} holds {} bytes, expected {needed}",
                    counts[idx]
                )));
            }
            let data = reader_slice(bytes, offsets[idx] as usize, needed, idx)?;
            for (i, chunk) in data.chunks_exact(bps).enumerate() {
                let v = read_sample(chunk, sample_type, endian);
                let band = if planar == 1 { i % samples } else { plane };
                bands[band].push(v);
            }
        }
    }

    let scale = ifd
        .numbers(MODEL_PIXEL_SCALE)?
        .ok_or(RasterError::MissingGeoTags("33550 (ModelPixelScale)"))?;
    let tie = ifd
        .numbers(MODEL_TIEPOINT)?
        .ok_or(RasterError::MissingGeoTags("33922 (ModelTiepoint)"))?;
    if scale.len() < 2 {
        return Err(RasterError::MalformedTiff(format!("tag 33550 holds {} values, expected 3", scale.len())));
    }
    if tie.len() < 6 {
        return Err(RasterError::MalformedTiff(format!("tag 33922 holds {} values, expected 6", tie.len())));
    }
    let geo = GeoTransform {
        origin_lon: tie[3] - tie[0] * scale[0],
        origin_lat: tie[4] + tie[1] * scale[1],
        pixel_scale_x: scale[0],
        pixel_scale_y: scale[1],
    };
    geo.validate().map_err(|e| RasterError::MalformedTiff(format!("tags 33550/33922: {e}")))?;

    let nodata = match ifd.ascii(GDAL_NODATA)? {
        Some(s) => Some(s.parse::<f64>().map_err(|_| {
            RasterError::MalformedTiff(format!("tag 42113: unparseable nodata value '{s}'"))
        })?),
        None => None,
    };

    RasterGrid::new(
        width,
        height,
        bands.into_iter().map(|values| BandPlane { values }).collect(),
        sample_type,
        geo,
        nodata,
    )
}

fn reader_slice(bytes: &[u8], offset: usize, len: usize, strip: usize) -> Result<&[u8]> {
    offset.checked_add(len).and_then(|end| bytes.get(offset..end)).ok_or_else(|| {
        RasterError::MalformedTiff(format!(
            "tag 273: strip {strip} at offset {offset} (+{len} bytes) exceeds file length {}",
            bytes.len()
        ))
    })
}

enum Value {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Double(Vec<f64>),
    Ascii(String),
}

impl Value {
    fn field_type(&self) -> u16 {
        match self {
            Value::Short(_) => TYPE_SHORT,
            Value::Long(_) => TYPE_LONG,
            Value::Double(_) => TYPE_DOUBLE,
            Value::Ascii(_) => TYPE_ASCII,
        }
    }

    fn count(&self) -> u32 {
        match self {
            Value::Short(v) => v.len() as u32,
            Value::Long(v) => v.len() as u32,
            Value::Double(v) => v.len() as u32,
            Value::Ascii(s) => s.len() as u32 + 1,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Value::Short(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Long(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Double(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Ascii(s) => s.bytes().chain(std::iter::once(0)).collect(),
        }
    }
}

fn stored_value(v: f64, sample_type: SampleType) -> Result<f64> {
    match sample_type {
        SampleType::Auto => Ok(auto_stretch(v) as f64),
        t if t.can_store(v) => Ok(v),
        t => Err(RasterError::RangeOverflow { value: v, sample_type: t }),
    }
}

fn push_sample(out: &mut Vec<u8>, v: f64, sample_type: SampleType) {
    match sample_type {
        SampleType::Uint8 | SampleType::Auto => out.push(v as u8),
        SampleType::Int8 => out.push(v as i8 as u8),
        SampleType::Uint16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
        SampleType::Int16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        SampleType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
    }
}

/// Encodes a grid as a little-endian, uncompressed, pixel-interleaved GeoTIFF.
///
/// `sample_type` selects the storage encoding; under AUTO the grid's values
/// are treated as reflectance and stretched onto UINT8.
pub fn encode_geotiff(grid: &RasterGrid, sample_type: SampleType) -> Result<Vec<u8>> {
    grid.validate()?;
    let samples = grid.bands.len();
    let bps = bytes_per_sample(sample_type);
    let (w, h) = (grid.width as usize, grid.height as usize);
    let row_bytes = w * samples * bps;
    let rows_per_strip = (TARGET_STRIP_BYTES / row_bytes).clamp(1, h);
    let strips = h.div_ceil(rows_per_strip);

    let nodata = match grid.nodata {
        Some(nd) if sample_type == SampleType::Auto => Some(nd),
        Some(nd) => Some(stored_value(nd, sample_type)?),
        None => None,
    };

    let mut data = Vec::with_capacity(row_bytes * h);
    let mut strip_offsets = Vec::with_capacity(strips);
    let mut strip_counts = Vec::with_capacity(strips);
    let data_start = 8usize;
    for s in 0..strips {
        let start = data.len();
        strip_offsets.push((data_start + start) as u32);
        let rows = rows_per_strip.min(h - s * rows_per_strip);
        for row in s * rows_per_strip..s * rows_per_strip + rows {
            for col in 0..w {
                for band in &grid.bands {
                    let v = band.values[row * w + col];
                    let stored = if sample_type == SampleType::Auto && nodata == Some(v) {
                        // nodata keeps its raw meaning rather than being stretched
                        stored_value(v, SampleType::Uint8)?
                    } else {
                        stored_value(v, sample_type)?
                    };
                    push_sample(&mut data, stored, sample_type);
                }
            }
        }
        strip_counts.push((data.len() - start) as u32);
    }

    let (bits, format) = match sample_type {
        SampleType::Uint8 | SampleType::Auto => (8, 1),
        SampleType::Int8 => (8, 2),
        SampleType::Uint16 => (16, 1),
        SampleType::Int16 => (16, 2),
        SampleType::Float32 => (32, 3),
    };
    let geo = grid.geo;
    let mut tags: Vec<(u16, Value)> = vec![
        (IMAGE_WIDTH, Value::Long(vec![grid.width])),
        (IMAGE_LENGTH, Value::Long(vec![grid.height])),
        (BITS_PER_SAMPLE, Value::Short(vec![bits; samples])),
        (COMPRESSION, Value::Short(vec![1])),
        (PHOTOMETRIC, Value::Short(vec![1])),
        (STRIP_OFFSETS, Value::Long(strip_offsets)),
        (SAMPLES_PER_PIXEL, Value::Short(vec![samples as u16])),
        (ROWS_PER_STRIP, Value::Long(vec![rows_per_strip as u32])),
        (STRIP_BYTE_COUNTS, Value::Long(strip_counts)),
        (PLANAR_CONFIGURATION, Value::Short(vec![1])),
    ];
    if samples > 1 {
        tags.push((EXTRA_SAMPLES, Value::Short(vec![0; samples - 1])));
    }
    tags.push((SAMPLE_FORMAT, Value::Short(vec![format; samples])));
    tags.push((MODEL_PIXEL_SCALE, Value::Double(vec![geo.pixel_scale_x, geo.pixel_scale_y, 0.0])));
    tags.push((
        MODEL_TIEPOINT,
        Value::Double(vec![0.0, 0.0, 0.0, geo.origin_lon, geo.origin_lat, 0.0]),
    ));
    // GTModelType=geographic, GTRasterType=PixelIsArea, GeographicType=WGS84
    tags.push((
        GEO_KEY_DIRECTORY,
        Value::Short(vec![1, 1, 0, 3, 1024, 0, 1, 2, 1025, 0, 1, 1, 2048, 0, 1, 4326]),
    ));
    if let Some(nd) = nodata {
        tags.push((GDAL_NODATA, Value::Ascii(format!("{nd}"))));
    }

    let mut out = Vec::with_capacity(data.len() + 512);
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    let mut ifd_offset = data_start + data.len();
    ifd_offset += ifd_offset % 2;
    out.extend_from_slice(&(ifd_offset as u32).to_le_bytes());
    out.extend_from_slice(&data);
    out.resize(ifd_offset, 0);

    let ifd_len = 2 + tags.len() * 12 + 4;
    let mut extra = Vec::new();
    let extra_start = ifd_offset + ifd_len;
    out.extend_from_slice(&(tags.len() as u16).to_le_bytes());
    for (tag, value) in &tags {
        let payload = value.to_le_bytes();
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&value.field_type().to_le_bytes());
        out.extend_from_slice(&value.count().to_le_bytes());
        if payload.len() <= 4 {
            let mut inline = [0u8; 4];
            inline[..payload.len()].copy_from_slice(&payload);
            out.extend_from_slice(&inline);
        } else {
            if extra.len() % 2 == 1 {
                extra.push(0);
            }
            out.extend_from_slice(&((extra_start + extra.len()) as u32).to_le_bytes());
            extra.extend_from_slice(&payload);
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&extra);
    Ok(out)
}
