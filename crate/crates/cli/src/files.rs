use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CliError, CliResult};

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `path`, hands a buffered writer to `body`, then flushes.
pub fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> hemlets::Result<()>) -> CliResult<()> {
    let mut out = File::create(path).map(BufWriter::new).map_err(io_error(path))?;
    body(&mut out).map_err(|e| match e {
        hemlets::Error::Io(source) => io_error(path)(source),
        e => CliError::Library(e),
    })?;
    out.flush().map_err(io_error(path))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_error(path))
}
