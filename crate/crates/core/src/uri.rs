//! Endpoint URIs: `file:///abs/path`, `s3://bucket/key`, `gs://…`, `azure://…`,
//! `stream://host:port/topic` and its alias `kafka://host:port/topic`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    File,
    S3,
    Gs,
    Azure,
    /// `stream://` and `kafka://` both parse to this.
    Stream,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::File => "file",
            Scheme::S3 => "s3",
            Scheme::Gs => "gs",
            Scheme::Azure => "azure",
            Scheme::Stream => "stream",
        }
    }

    pub fn is_object(self) -> bool {
        !matches!(self, Scheme::Stream)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UriError {
    #[error("unsupported scheme in {0:?} (expected file, s3, gs, azure, stream or kafka)")]
    UnsupportedScheme(String),
    #[error("malformed URI {uri:?}: {reason}")]
    Malformed { uri: String, reason: &'static str },
}

#[derive(Debug, Clone, Eq)]
pub struct EndpointUri {
    pub scheme: Scheme,
    /// `host:port` for streams, bucket/container for object stores, empty for files.
    pub authority: String,
    /// Object key, topic name, or absolute filesystem path.
    pub path: String,
    /// The text this was parsed from.
    pub raw: String,
}

impl PartialEq for EndpointUri {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme && self.authority == other.authority && self.path == other.path
    }
}

impl EndpointUri {
    pub fn parse(text: &str) -> Result<Self, UriError> {
        let malformed = |reason| UriError::Malformed {
            uri: text.to_string(),
            reason,
        };
        let (scheme_str, rest) = text
            .split_once("://")
            .ok_or_else(|| UriError::UnsupportedScheme(text.to_string()))?;
        let scheme = match scheme_str.to_ascii_lowercase().as_str() {
            "file" => Scheme::File,
            "s3" => Scheme::S3,
            "gs" => Scheme::Gs,
            "azure" => Scheme::Azure,
            "stream" | "kafka" => Scheme::Stream,
            _ => return Err(UriError::UnsupportedScheme(text.to_string())),
        };

        let (authority, path) = match scheme {
            Scheme::File => {
                // file:///abs/path or file://localhost/abs/path
                let path = if let Some(p) = rest.strip_prefix("localhost/") {
                    format!("/{p}")
                } else if rest.starts_with('/') {
                    rest.to_string()
                } else {
                    return Err(malformed("file URIs need an absolute path (file:///path)"));
                };
                let trimmed = path.trim_end_matches('/');
                if trimmed.is_empty() {
                    return Err(malformed("empty file path"));
                }
                (String::new(), trimmed.to_string())
            }
            Scheme::S3 | Scheme::Gs | Scheme::Azure => {
                let (bucket, key) = rest
                    .split_once('/')
                    .ok_or_else(|| malformed("expected <bucket>/<key>"))?;
                if bucket.is_empty() {
                    return Err(malformed("empty bucket"));
                }
                if key.is_empty() {
                    return Err(malformed("empty object key"));
                }
                (bucket.to_string(), key.to_string())
            }
            Scheme::Stream => {
                let (host, topic) = rest
                    .split_once('/')
                    .ok_or_else(|| malformed("expected <host:port>/<topic>"))?;
                let (h, port) = host
                    .rsplit_once(':')
                    .ok_or_else(|| malformed("stream authority needs host:port"))?;
                if h.is_empty() || port.parse::<u16>().is_err() {
                    return Err(malformed("stream authority needs host:port"));
                }
                let topic = topic.trim_end_matches('/');
                if topic.is_empty() || topic.contains('/') {
                    return Err(malformed("topic must be one non-empty path segment"));
                }
                (host.to_string(), topic.to_string())
            }
        };
        Ok(Self {
            scheme,
            authority,
            path,
            raw: text.to_string(),
        })
    }

    pub fn is_stream(&self) -> bool {
        self.scheme == Scheme::Stream
    }

    /// Topic name, for stream URIs.
    pub fn topic(&self) -> Option<&str> {
        self.is_stream().then_some(self.path.as_str())
    }

    /// The canonical text form; re-parses to an equal value.
    pub fn canonical(&self) -> String {
        match self.scheme {
            Scheme::File => format!("file://{}", self.path),
            s => format!("{}://{}/{}", s.as_str(), self.authority, self.path),
        }
    }
}

impl fmt::Display for EndpointUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for EndpointUri {
    type Err = UriError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
