use std::fs::File;
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::{Backend, ObjectError, ObjectRef, RangeReader};

/// A file in a local directory, read with positioned reads so parallel readers share
/// one descriptor.
pub struct LocalFile {
    path: PathBuf,
    file: File,
    size: u64,
}

impl LocalFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ObjectError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ObjectError::NotFound(path.display().to_string()),
            _ => ObjectError::Io(e),
        })?;
        let meta = file.metadata()?;
        if !meta.is_file() {
            return Err(ObjectError::NotFound(format!(
                "{} is not a regular file",
                path.display()
            )));
        }
        Ok(Self {
            size: meta.len(),
            path,
            file,
        })
    }

    pub fn object_ref(&self) -> ObjectRef {
        ObjectRef {
            backend: Backend::LocalDir,
            container: self.path.parent().map(|p| p.display().to_string()).unwrap_or_default(),
            key: self
                .path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            size_bytes: self.size,
        }
    }
}

impl RangeReader for LocalFile {
    fn read_range(&self, start: u64, len: u64) -> Result<Vec<u8>, ObjectError> {
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact_at(&mut buf, start).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => ObjectError::Range {
                start,
                expected: len,
                got: self.size.saturating_sub(start).min(len),
            },
            _ => ObjectError::Io(e),
        })?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::object::ObjectHandle;
    use crate::uri::EndpointUri;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn range_equals_slice_of_whole_read(
            data in proptest::collection::vec(any::<u8>(), 0..5000),
            a in 0usize..5000, b in 0usize..5000,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("obj");
            std::fs::write(&path, &data).unwrap();
            let f = LocalFile::open(&path).unwrap();
            let (s, e) = (a.min(b).min(data.len()), a.max(b).min(data.len()));
            let got = f.read_range(s as u64, (e - s) as u64).unwrap();
            prop_assert_eq!(&got[..], &std::fs::read(&path).unwrap()[s..e]);
        }
    }

    #[test]
    fn open_through_uri() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        std::fs::write(&path, b"0123456789").unwrap();
        let uri = EndpointUri::parse(&format!("file://{}", path.display())).unwrap();
        let h = ObjectHandle::open(&uri).unwrap();
        assert_eq!(h.object.key, "data.bin");
        assert_eq!(h.object.backend, Backend::LocalDir);
        assert_eq!(h.size(), 10);
        assert_eq!(h.read_range(8, 2).unwrap(), b"89");
        assert!(matches!(h.read_range(8, 3), Err(ObjectError::Range { .. })));

        let missing = EndpointUri::parse(&format!("file://{}/nope", dir.path().display())).unwrap();
        assert!(matches!(ObjectHandle::open(&missing), Err(ObjectError::NotFound(_))));
    }
}
