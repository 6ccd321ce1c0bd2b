//! Drop-in rANS coding backend, byte-identical to the host's reference coder.
//!
//! Contract "rans-16-L23-v1": 16-bit probabilities summing to 65536, state
//! lower bound 2^23, byte-wise renormalization, symbols encoded in reverse,
//! stream = 4-byte little-endian flush of the final state followed by the
//! renormalization bytes in reverse emission order.
//!
//! Everything crosses the boundary as flat little-endian byte buffers:
//!   TableBlob: count u32, then per table
//!              { symbol_count u16, offset i32, cdf u32[symbol_count + 1] }
//!   symbols:   i32 values;  table indices: u32 per symbol.
//! Failures are error codes, never unwinding across the FFI.

use std::os::raw::c_char;

pub const PROB_BITS: u32 = 16;
pub const PROB_SCALE: u32 = 1 << PROB_BITS;
pub const STATE_LOWER: u64 = 1 << 23;
pub const VERSION: &[u8] = b"rans-16-L23-v1\0";

pub const OK: i32 = 0;
pub const ERR_TABLE_BLOB: i32 = 1;
pub const ERR_CAPACITY: i32 = 2;
pub const ERR_STREAM: i32 = 3;
pub const ERR_ARGS: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub offset: i32,
    pub cdf: Vec<u32>,
}

impl Table {
    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }
}

/// Parse a TableBlob; every integer little-endian, strict length checks.
pub fn parse_tables(blob: &[u8]) -> Result<Vec<Table>, i32> {
    let mut pos = 0usize;
    let count = read_u32(blob, &mut pos)? as usize;
    let mut tables = Vec::with_capacity(count);
    for _ in 0..count {
        let symbol_count = read_u16(blob, &mut pos)? as usize;
        let offset = read_u32(blob, &mut pos)? as i32;
        if symbol_count == 0 {
            return Err(ERR_TABLE_BLOB);
        }
        let mut cdf = Vec::with_capacity(symbol_count + 1);
        for _ in 0..=symbol_count {
            cdf.push(read_u32(blob, &mut pos)?);
        }
        if cdf[0] != 0 || cdf[symbol_count] != PROB_SCALE {
            return Err(ERR_TABLE_BLOB);
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ERR_TABLE_BLOB);
        }
        tables.push(Table { offset, cdf });
    }
    if pos != blob.len() {
        return Err(ERR_TABLE_BLOB);
    }
    Ok(tables)
}

fn read_u32(blob: &[u8], pos: &mut usize) -> Result<u32, i32> {
    let end = pos.checked_add(4).ok_or(ERR_TABLE_BLOB)?;
    if end > blob.len() {
        return Err(ERR_TABLE_BLOB);
    }
    let v = u32::from_le_bytes(blob[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

fn read_u16(blob: &[u8], pos: &mut usize) -> Result<u16, i32> {
    let end = pos.checked_add(2).ok_or(ERR_TABLE_BLOB)?;
    if end > blob.len() {
        return Err(ERR_TABLE_BLOB);
    }
    let v = u16::from_le_bytes(blob[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// Encode symbol values against per-symbol tables; byte-identical to the
/// reference coder.  Out-of-support values clamp to the table edge.
pub fn encode(values: &[i32], table_of: &[u32], tables: &[Table]) -> Result<Vec<u8>, i32> {
    if values.len() != table_of.len() {
        return Err(ERR_ARGS);
    }
    for &t in table_of {
        if t as usize >= tables.len() {
            return Err(ERR_ARGS);
        }
    }
    let mut renorm: Vec<u8> = Vec::with_capacity(2 * values.len() + 8);
    let mut x: u64 = STATE_LOWER;
    let shift: u64 = (STATE_LOWER >> PROB_BITS) << 8;
    for i in (0..values.len()).rev() {
        let table = &tables[table_of[i] as usize];
        let max_idx = (table.num_symbols() - 1) as i64;
        let idx = ((values[i] as i64) - (table.offset as i64)).clamp(0, max_idx) as usize;
        let start = table.cdf[idx] as u64;
        let freq = (table.cdf[idx + 1] - table.cdf[idx]) as u64;
        let x_max = shift * freq;
        while x >= x_max {
            renorm.push((x & 0xFF) as u8);
            x >>= 8;
        }
        x = ((x / freq) << PROB_BITS) + (x % freq) + start;
    }
    let mut out = Vec::with_capacity(renorm.len() + 4);
    out.extend_from_slice(&(x as u32).to_le_bytes());
    out.extend(renorm.iter().rev());
    Ok(out)
}

/// Exact inverse of `encode`; checks stream integrity.
pub fn decode(
    data: &[u8],
    table_of: &[u32],
    tables: &[Table],
    out: &mut [i32],
) -> Result<(), i32> {
    if table_of.len() != out.len() {
        return Err(ERR_ARGS);
    }
    for &t in table_of {
        if t as usize >= tables.len() {
            return Err(ERR_ARGS);
        }
    }
    if data.len() < 4 {
        return Err(ERR_STREAM);
    }
    let mut x = u32::from_le_bytes(data[0..4].try_into().unwrap()) as u64;
    let mut pos = 4usize;
    for i in 0..out.len() {
        let table = &tables[table_of[i] as usize];
        let cf = x & 0xFFFF;
        // largest s with cdf[s] <= cf
        let mut lo = 0usize;
        let mut hi = table.num_symbols() - 1;
        while lo < hi {
            let mid = (lo + hi + 1) >> 1;
            if table.cdf[mid] as u64 <= cf {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let start = table.cdf[lo] as u64;
        let freq = (table.cdf[lo + 1] - table.cdf[lo]) as u64;
        x = freq * (x >> PROB_BITS) + cf - start;
        while x < STATE_LOWER {
            if pos >= data.len() {
                return Err(ERR_STREAM);
            }
            x = (x << 8) | data[pos] as u64;
            pos += 1;
        }
        out[i] = table.offset + lo as i32;
    }
    if x != STATE_LOWER || pos != data.len() {
        return Err(ERR_STREAM);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embedded known-answer vectors (generated by the reference coder)

const FIXTURES: &[u8] = include_bytes!("../fixtures/kat.bin");

pub struct FixtureCase {
    pub tables: Vec<Table>,
    pub values: Vec<i32>,
    pub table_of: Vec<u32>,
    pub stream: Vec<u8>,
}

pub fn load_fixtures(blob: &[u8]) -> Result<Vec<FixtureCase>, i32> {
    let mut pos = 0usize;
    let count = read_u32(blob, &mut pos)? as usize;
    let mut cases = Vec::with_capacity(count);
    for _ in 0..count {
        let blob_len = read_u32(blob, &mut pos)? as usize;
        if pos + blob_len > blob.len() {
            return Err(ERR_TABLE_BLOB);
        }
        let tables = parse_tables(&blob[pos..pos + blob_len])?;
        pos += blob_len;
        let n = read_u32(blob, &mut pos)? as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(read_u32(blob, &mut pos)? as i32);
        }
        let mut table_of = Vec::with_capacity(n);
        for _ in 0..n {
            table_of.push(read_u32(blob, &mut pos)?);
        }
        let stream_len = read_u32(blob, &mut pos)? as usize;
        if pos + stream_len > blob.len() {
            return Err(ERR_TABLE_BLOB);
        }
        let stream = blob[pos..pos + stream_len].to_vec();
        pos += stream_len;
        cases.push(FixtureCase { tables, values, table_of, stream });
    }
    if pos != blob.len() {
        return Err(ERR_TABLE_BLOB);
    }
    Ok(cases)
}

/// Run the embedded known-answer vectors; returns a line-per-case report.
pub fn selftest() -> (bool, String) {
    let cases = match load_fixtures(FIXTURES) {
        Ok(c) => c,
        Err(code) => return (false, format!("FAIL: fixture archive unreadable (code {code})\n")),
    };
    let mut ok = true;
    let mut report = String::new();
    for (k, case) in cases.iter().enumerate() {
        let encoded = match encode(&case.values, &case.table_of, &case.tables) {
            Ok(e) => e,
            Err(code) => {
                ok = false;
                report.push_str(&format!("case {k}: FAIL encode (code {code})\n"));
                continue;
            }
        };
        let enc_ok = encoded == case.stream;
        let mut decoded = vec![0i32; case.values.len()];
        let dec_ok = decode(&case.stream, &case.table_of, &case.tables, &mut decoded).is_ok()
            && decoded == case.values;
        if enc_ok && dec_ok {
            report.push_str(&format!(
                "case {k}: PASS ({} symbols, {} bytes)\n",
                case.values.len(),
                case.stream.len()
            ));
        } else {
            ok = false;
            report.push_str(&format!(
                "case {k}: FAIL (encode match: {enc_ok}, decode match: {dec_ok})\n"
            ));
        }
    }
    report.push_str(if ok { "overall: PASS\n" } else { "overall: FAIL\n" });
    (ok, report)
}

// ---------------------------------------------------------------------------
// C ABI

/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub extern "C" fn rans_backend_version() -> *const c_char {
    VERSION.as_ptr() as *const c_char
}

/// # Safety
/// `symbols`/`table_indices` hold `n` elements; `out` holds `out_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rans_backend_encode(
    symbols: *const i32,
    n: u64,
    table_blob: *const u8,
    table_blob_len: u64,
    table_indices: *const u32,
    out: *mut u8,
    out_cap: u64,
    out_len: *mut u64,
) -> i32 {
    if symbols.is_null() && n > 0 {
        return ERR_ARGS;
    }
    if table_blob.is_null() || out.is_null() || out_len.is_null() {
        return ERR_ARGS;
    }
    let values = std::slice::from_raw_parts(symbols, n as usize);
    let blob = std::slice::from_raw_parts(table_blob, table_blob_len as usize);
    let idx = std::slice::from_raw_parts(table_indices, n as usize);
    let tables = match parse_tables(blob) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let encoded = match encode(values, idx, &tables) {
        Ok(e) => e,
        Err(code) => return code,
    };
    if encoded.len() as u64 > out_cap {
        return ERR_CAPACITY;
    }
    std::ptr::copy_nonoverlapping(encoded.as_ptr(), out, encoded.len());
    *out_len = encoded.len() as u64;
    OK
}

/// # Safety
/// `data` holds `data_len` bytes; `table_indices` and `out_symbols` hold `n`.
#[no_mangle]
pub unsafe extern "C" fn rans_backend_decode(
    data: *const u8,
    data_len: u64,
    table_blob: *const u8,
    table_blob_len: u64,
    table_indices: *const u32,
    n: u64,
    out_symbols: *mut i32,
) -> i32 {
    if data.is_null() || table_blob.is_null() || (out_symbols.is_null() && n > 0) {
        return ERR_ARGS;
    }
    let stream = std::slice::from_raw_parts(data, data_len as usize);
    let blob = std::slice::from_raw_parts(table_blob, table_blob_len as usize);
    let idx = std::slice::from_raw_parts(table_indices, n as usize);
    let tables = match parse_tables(blob) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let out = std::slice::from_raw_parts_mut(out_symbols, n as usize);
    match decode(stream, idx, &tables, out) {
        Ok(()) => OK,
        Err(code) => code,
    }
}

/// # Safety
/// `report` holds `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rans_backend_selftest(
    report: *mut u8,
    cap: u64,
    len: *mut u64,
) -> i32 {
    let (ok, text) = selftest();
    if !report.is_null() && !len.is_null() {
        let n = text.len().min(cap as usize);
        std::ptr::copy_nonoverlapping(text.as_ptr(), report, n);
        *len = n as u64;
    }
    if ok {
        OK
    } else {
        ERR_STREAM
    }
}
