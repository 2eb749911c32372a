//! Just enough Windows PE parsing to attribute file offsets to named
//! regions, plus a builder for minimal valid PE files used by the synthetic
//! corpus.
//!
//! The parser reads only the fields offset attribution needs: the MZ magic,
//! `e_lfanew`, the PE signature, `NumberOfSections`, `SizeOfOptionalHeader`,
//! `SizeOfHeaders`, and the 40-byte section headers. Real malware violates
//! the format spec freely, so nothing here panics or errors on malformed
//! input; failures downgrade `parse_status` instead.

use crate::error::{Error, Result};

pub const DOS_MAGIC: &[u8; 2] = b"MZ";
pub const PE_SIGNATURE: &[u8; 4] = b"PE\0\0";
pub const E_LFANEW_OFFSET: usize = 0x3C;
pub const SECTION_HEADER_SIZE: usize = 40;
/// Builder raw-data alignment.
pub const FILE_ALIGNMENT: usize = 512;

/// Names of the pseudo-regions offsets can fall into besides real sections.
pub const REGION_HEADER: &str = "PE-Header";
pub const REGION_OVERLAY: &str = "overlay";
pub const REGION_SLACK: &str = "slack";
pub const REGION_UNKNOWN: &str = "unknown";

/// One entry of the section table, trimmed to the fields we attribute with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionRecord {
    /// Up to 8 bytes, trailing NULs stripped.
    pub name: String,
    pub raw_offset: usize,
    pub raw_size: usize,
    pub virtual_size: usize,
}

impl SectionRecord {
    fn raw_end(&self) -> usize {
        self.raw_offset.saturating_add(self.raw_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseStatus {
    /// Headers and section table read cleanly.
    Ok,
    /// Structures were truncated or point out of range; whatever could be
    /// recovered is recorded.
    Degraded,
    /// Not a PE file as far as we can tell; no sections recovered.
    Unparseable,
}

/// Parsed file layout: the leading header span and the section table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionMap {
    /// End of the header region: the smallest section raw offset, falling
    /// back to `SizeOfHeaders`, clamped to the file length.
    pub header_end: usize,
    /// Sections in section-table order.
    pub sections: Vec<SectionRecord>,
    pub file_len: usize,
    pub parse_status: ParseStatus,
}

fn read_u16(bytes: &[u8], off: usize) -> Option<u16> {
    let b = bytes.get(off..off + 2)?;
    Some(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], off: usize) -> Option<u32> {
    let b = bytes.get(off..off + 4)?;
    Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn unparseable(file_len: usize) -> SectionMap {
    SectionMap {
        header_end: 0,
        sections: Vec::new(),
        file_len,
        parse_status: ParseStatus::Unparseable,
    }
}

/// Parses the PE layout of arbitrary bytes. Never fails: files that are not
/// PE at all come back `Unparseable` with zero sections, and truncated or
/// out-of-range structures downgrade to `Degraded`.
pub fn parse_pe(bytes: &[u8]) -> SectionMap {
    let file_len = bytes.len();
    if file_len < E_LFANEW_OFFSET + 4 || &bytes[0..2] != DOS_MAGIC {
        return unparseable(file_len);
    }
    let pe = match read_u32(bytes, E_LFANEW_OFFSET) {
        Some(v) => v as usize,
        None => return unparseable(file_len),
    };
    match bytes.get(pe..pe + 4) {
        Some(sig) if sig == PE_SIGNATURE => {}
        _ => return unparseable(file_len),
    }
    // COFF header follows the signature; NumberOfSections at pe+6,
    // SizeOfOptionalHeader at pe+20, optional header at pe+24.
    let (n_sections, size_opt) = match (read_u16(bytes, pe + 6), read_u16(bytes, pe + 20)) {
        (Some(n), Some(s)) => (n as usize, s as usize),
        _ => return unparseable(file_len),
    };
    let opt_base = pe + 24;
    // SizeOfHeaders sits 60 bytes into the optional header for both PE32
    // and PE32+.
    let size_of_headers = if size_opt >= 64 {
        read_u32(bytes, opt_base + 60).map(|v| v as usize)
    } else {
        None
    };

    let mut status = ParseStatus::Ok;
    let table_base = match opt_base.checked_add(size_opt) {
        Some(v) => v,
        None => return unparseable(file_len),
    };
    let mut sections = Vec::with_capacity(n_sections.min(64));
    for i in 0..n_sections {
        let off = table_base + i * SECTION_HEADER_SIZE;
        if off + SECTION_HEADER_SIZE > file_len {
            status = ParseStatus::Degraded;
            break;
        }
        let name_bytes = &bytes[off..off + 8];
        let name_end = name_bytes
            .iter()
            .rposition(|&b| b != 0)
            .map_or(0, |p| p + 1);
        let name = String::from_utf8_lossy(&name_bytes[..name_end]).into_owned();
        let virtual_size = read_u32(bytes, off + 8).unwrap_or(0) as usize;
        let raw_size = read_u32(bytes, off + 16).unwrap_or(0) as usize;
        let raw_offset = read_u32(bytes, off + 20).unwrap_or(0) as usize;
        if raw_offset.saturating_add(raw_size) > file_len {
            // recorded, not fatal
            status = ParseStatus::Degraded;
        }
        sections.push(SectionRecord {
            name,
            raw_offset,
            raw_size,
            virtual_size,
        });
    }

    let min_raw = sections
        .iter()
        .filter(|s| s.raw_size > 0)
        .map(|s| s.raw_offset)
        .min();
    let header_end = min_raw
        .or(size_of_headers)
        .unwrap_or(table_base + n_sections * SECTION_HEADER_SIZE)
        .min(file_len);

    SectionMap {
        header_end,
        sections,
        file_len,
        parse_status: status,
    }
}

/// Names the region a file offset falls in: the header span, a section,
/// `overlay` past the last section, `slack` between mapped regions, or
/// `unknown` for unparseable files.
pub fn offset_to_region(map: &SectionMap, offset: usize) -> Result<&str> {
    if offset >= map.file_len {
        return Err(Error::Input(format!(
            "offset {offset} outside file of {} bytes",
            map.file_len
        )));
    }
    if map.parse_status == ParseStatus::Unparseable {
        return Ok(REGION_UNKNOWN);
    }
    if offset < map.header_end {
        return Ok(REGION_HEADER);
    }
    for s in &map.sections {
        if s.raw_size > 0 && offset >= s.raw_offset && offset < s.raw_end() {
            return Ok(&s.name);
        }
    }
    let max_end = map
        .sections
        .iter()
        .map(|s| s.raw_end().min(map.file_len))
        .max()
        .unwrap_or(map.header_end);
    if offset >= max_end {
        Ok(REGION_OVERLAY)
    } else {
        Ok(REGION_SLACK)
    }
}

/// Section content for [`build_pe`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeSection {
    pub name: String,
    pub content: Vec<u8>,
}

impl PeSection {
    pub fn new(name: impl Into<String>, content: Vec<u8>) -> Self {
        PeSection {
            name: name.into(),
            content,
        }
    }
}

fn align_up(v: usize, alignment: usize) -> usize {
    v.div_ceil(alignment) * alignment
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Emits a minimal valid PE32 file: DOS header, PE signature, COFF header,
/// optional header, section table, and 512-byte-aligned section raw data.
/// Deterministic given sections and seed; `parse_pe` recovers the section
/// names, offsets, and sizes exactly.
pub fn build_pe(sections: &[PeSection], seed: u64) -> Result<Vec<u8>> {
    if sections.len() > 16 {
        return Err(Error::Input(format!(
            "at most 16 sections supported, got {}",
            sections.len()
        )));
    }
    for s in sections {
        if s.name.len() > 8 {
            return Err(Error::Input(format!(
                "section name {:?} longer than 8 bytes",
                s.name
            )));
        }
    }

    const DOS_LEN: usize = 64;
    const COFF_LEN: usize = 20;
    const OPT_LEN: usize = 224; // PE32 with 16 data directories
    let pe = DOS_LEN;
    let opt_base = pe + 4 + COFF_LEN;
    let table_base = opt_base + OPT_LEN;
    let headers_raw = table_base + sections.len() * SECTION_HEADER_SIZE;
    let size_of_headers = align_up(headers_raw, FILE_ALIGNMENT);

    // Lay out raw data and virtual addresses up front.
    let section_alignment = 0x1000usize;
    let mut raw_cursor = size_of_headers;
    let mut va_cursor = section_alignment;
    let mut layouts = Vec::with_capacity(sections.len());
    for s in sections {
        let raw_size = align_up(s.content.len().max(1), FILE_ALIGNMENT);
        layouts.push((raw_cursor, raw_size, va_cursor));
        raw_cursor += raw_size;
        va_cursor += align_up(s.content.len().max(1), section_alignment);
    }
    let file_len = raw_cursor;
    let size_of_image = va_cursor;

    let mut out = vec![0u8; file_len];
    let put_u16 = |out: &mut Vec<u8>, off: usize, v: u16| {
        out[off..off + 2].copy_from_slice(&v.to_le_bytes());
    };
    let put_u32 = |out: &mut Vec<u8>, off: usize, v: u32| {
        out[off..off + 4].copy_from_slice(&v.to_le_bytes());
    };

    // DOS header: magic plus the pointer to the PE header.
    out[0..2].copy_from_slice(DOS_MAGIC);
    put_u32(&mut out, E_LFANEW_OFFSET, pe as u32);

    out[pe..pe + 4].copy_from_slice(PE_SIGNATURE);

    // COFF header.
    let coff = pe + 4;
    put_u16(&mut out, coff, 0x014C); // i386
    put_u16(&mut out, coff + 2, sections.len() as u16);
    put_u32(&mut out, coff + 4, splitmix64(seed) as u32); // TimeDateStamp
    put_u16(&mut out, coff + 16, OPT_LEN as u16);
    put_u16(&mut out, coff + 18, 0x0102); // EXECUTABLE_IMAGE | 32BIT_MACHINE

    // Optional header, PE32.
    put_u16(&mut out, opt_base, 0x010B);
    let code_size: usize = layouts.first().map_or(0, |&(_, raw, _)| raw);
    put_u32(&mut out, opt_base + 4, code_size as u32); // SizeOfCode
    put_u32(
        &mut out,
        opt_base + 16,
        layouts.first().map_or(0, |&(_, _, va)| va) as u32,
    ); // entry point
    put_u32(&mut out, opt_base + 20, 0x1000); // BaseOfCode
    put_u32(&mut out, opt_base + 24, 0x2000); // BaseOfData
    put_u32(&mut out, opt_base + 28, 0x0040_0000); // ImageBase
    put_u32(&mut out, opt_base + 32, section_alignment as u32);
    put_u32(&mut out, opt_base + 36, FILE_ALIGNMENT as u32);
    put_u16(&mut out, opt_base + 40, 4); // MajorOperatingSystemVersion
    put_u16(&mut out, opt_base + 48, 4); // MajorSubsystemVersion
    put_u32(&mut out, opt_base + 56, size_of_image as u32);
    put_u32(&mut out, opt_base + 60, size_of_headers as u32);
    put_u16(&mut out, opt_base + 68, 3); // console subsystem
    put_u32(&mut out, opt_base + 72, 0x0010_0000); // SizeOfStackReserve
    put_u32(&mut out, opt_base + 76, 0x1000); // SizeOfStackCommit
    put_u32(&mut out, opt_base + 80, 0x0010_0000); // SizeOfHeapReserve
    put_u32(&mut out, opt_base + 84, 0x1000); // SizeOfHeapCommit
    put_u32(&mut out, opt_base + 92, 16); // NumberOfRvaAndSizes; directories stay zero

    // Section table and raw data.
    for (i, (s, &(raw_off, raw_size, va))) in sections.iter().zip(&layouts).enumerate() {
        let h = table_base + i * SECTION_HEADER_SIZE;
        out[h..h + s.name.len()].copy_from_slice(s.name.as_bytes());
        put_u32(&mut out, h + 8, s.content.len() as u32); // VirtualSize
        put_u32(&mut out, h + 12, va as u32);
        put_u32(&mut out, h + 16, raw_size as u32);
        put_u32(&mut out, h + 20, raw_off as u32);
        let characteristics: u32 = if i == 0 { 0x6000_0020 } else { 0xC000_0040 };
        put_u32(&mut out, h + 36, characteristics);

        out[raw_off..raw_off + s.content.len()].copy_from_slice(&s.content);
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_one_section_round_trips() {
        let content = vec![0xCCu8; 512];
        let file = build_pe(&[PeSection::new(".text", content)], 7).unwrap();
        let map = parse_pe(&file);
        assert_eq!(map.parse_status, ParseStatus::Ok);
        assert_eq!(map.sections.len(), 1);
        assert_eq!(map.sections[0].name, ".text");
        assert_eq!(map.sections[0].raw_size, 512);
        assert_eq!(map.sections[0].raw_offset, 512);
        assert_eq!(map.header_end, 512);
        assert_eq!(map.file_len, file.len());
    }

    #[test]
    fn build_zero_sections_is_valid() {
        let file = build_pe(&[], 3).unwrap();
        let map = parse_pe(&file);
        assert_eq!(map.parse_status, ParseStatus::Ok);
        assert!(map.sections.is_empty());
        // every offset is either header or overlay
        for off in 0..map.file_len {
            let region = offset_to_region(&map, off).unwrap();
            assert!(region == REGION_HEADER || region == REGION_OVERLAY);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let sections = vec![
            PeSection::new(".text", vec![1, 2, 3]),
            PeSection::new(".data", vec![9; 700]),
        ];
        assert_eq!(
            build_pe(&sections, 42).unwrap(),
            build_pe(&sections, 42).unwrap()
        );
        assert_ne!(
            build_pe(&sections, 42).unwrap(),
            build_pe(&sections, 43).unwrap()
        );
    }

    #[test]
    fn build_rejects_oversize_name_and_too_many_sections() {
        assert!(build_pe(&[PeSection::new("longname1", vec![0])], 0).is_err());
        let many: Vec<PeSection> = (0..17)
            .map(|i| PeSection::new(format!("s{i}"), vec![0]))
            .collect();
        assert!(build_pe(&many, 0).is_err());
    }

    #[test]
    fn multi_section_round_trip_recovers_table_exactly() {
        let sections = vec![
            PeSection::new(".text", vec![0x90; 300]),
            PeSection::new(".data", vec![0x11; 513]),
            PeSection::new("UPX1", vec![0x22; 64]),
        ];
        let file = build_pe(&sections, 5).unwrap();
        let map = parse_pe(&file);
        assert_eq!(map.parse_status, ParseStatus::Ok);
        assert_eq!(map.sections.len(), 3);
        assert_eq!(map.sections[0].name, ".text");
        assert_eq!(map.sections[1].name, ".data");
        assert_eq!(map.sections[2].name, "UPX1");
        assert_eq!(map.sections[0].virtual_size, 300);
        assert_eq!(map.sections[1].raw_size, 1024); // 513 rounded to alignment
        // sections are laid out back to back from SizeOfHeaders, which for a
        // 3-section table is 432 bytes rounded up to 512
        assert_eq!(map.sections[0].raw_offset, 512);
        assert_eq!(map.sections[1].raw_offset, 1024);
        assert_eq!(map.sections[2].raw_offset, 2048);
    }

    #[test]
    fn non_mz_input_is_unparseable() {
        let map = parse_pe(b"ELF not a pe file at all, but long enough to index");
        assert_eq!(map.parse_status, ParseStatus::Unparseable);
        assert!(map.sections.is_empty());
        assert_eq!(offset_to_region(&map, 0).unwrap(), REGION_UNKNOWN);
    }

    #[test]
    fn e_lfanew_past_end_is_unparseable() {
        let mut file = build_pe(&[PeSection::new(".text", vec![0; 10])], 0).unwrap();
        let len = file.len() as u32;
        file[E_LFANEW_OFFSET..E_LFANEW_OFFSET + 4].copy_from_slice(&(len + 100).to_le_bytes());
        let map = parse_pe(&file);
        assert_eq!(map.parse_status, ParseStatus::Unparseable);
        assert!(map.sections.is_empty());
    }

    #[test]
    fn truncated_section_table_degrades() {
        let file = build_pe(&[PeSection::new(".text", vec![0; 600])], 0).unwrap();
        // cut the file inside the section table
        let map = parse_pe(&file[..330]);
        assert_eq!(map.parse_status, ParseStatus::Degraded);
    }

    #[test]
    fn offset_zero_is_header_and_text_span_attributes() {
        let file = build_pe(
            &[
                PeSection::new(".text", vec![0xAA; 512]),
                PeSection::new(".rsrc", vec![0xBB; 100]),
            ],
            1,
        )
        .unwrap();
        let map = parse_pe(&file);
        assert_eq!(offset_to_region(&map, 0).unwrap(), REGION_HEADER);
        let text = &map.sections[0];
        assert_eq!(offset_to_region(&map, text.raw_offset).unwrap(), ".text");
        assert_eq!(
            offset_to_region(&map, text.raw_offset + text.raw_size - 1).unwrap(),
            ".text"
        );
        let rsrc = &map.sections[1];
        assert_eq!(
            offset_to_region(&map, rsrc.raw_offset + 50).unwrap(),
            ".rsrc"
        );
    }

    #[test]
    fn appended_bytes_are_overlay() {
        let mut file = build_pe(&[PeSection::new(".text", vec![0; 128])], 9).unwrap();
        file.extend_from_slice(&[0xEE; 37]);
        let map = parse_pe(&file);
        assert_eq!(
            offset_to_region(&map, map.file_len - 1).unwrap(),
            REGION_OVERLAY
        );
    }

    #[test]
    fn offset_out_of_file_is_an_error() {
        let file = build_pe(&[], 0).unwrap();
        let map = parse_pe(&file);
        assert!(offset_to_region(&map, map.file_len).is_err());
    }

    #[test]
    fn every_offset_maps_to_exactly_one_region() {
        let mut file = build_pe(
            &[
                PeSection::new("a", vec![1; 100]),
                PeSection::new("b", vec![2; 600]),
            ],
            13,
        )
        .unwrap();
        file.extend_from_slice(&[0; 50]);
        let map = parse_pe(&file);
        let mut counts = std::collections::BTreeMap::new();
        for off in 0..map.file_len {
            let region = offset_to_region(&map, off).unwrap().to_string();
            *counts.entry(region).or_insert(0usize) += 1;
        }
        let total: usize = counts.values().sum();
        assert_eq!(total, map.file_len);
        assert!(counts.contains_key(REGION_HEADER));
        assert!(counts.contains_key("a"));
        assert!(counts.contains_key(REGION_OVERLAY));
        // raw sizes are alignment-padded, so the whole aligned span counts
        assert_eq!(counts.get("a"), Some(&512));
    }

    #[test]
    fn parser_survives_mutated_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let base = build_pe(
            &[
                PeSection::new(".text", vec![0x90; 400]),
                PeSection::new(".data", vec![0x00; 200]),
            ],
            7,
        )
        .unwrap();
        for _ in 0..2_000 {
            let mut mutated = base.clone();
            for _ in 0..rng.random_range(1..8) {
                let pos = rng.random_range(0..mutated.len());
                mutated[pos] = rng.random();
            }
            if rng.random::<f64>() < 0.3 {
                let cut = rng.random_range(0..mutated.len());
                mutated.truncate(cut);
            }
            let map = parse_pe(&mutated);
            // totality plus attribution on whatever came back
            for off in [0usize, mutated.len().saturating_sub(1)] {
                if off < map.file_len {
                    offset_to_region(&map, off).unwrap();
                }
            }
        }
    }
}
