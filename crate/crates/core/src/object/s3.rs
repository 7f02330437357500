//! Range reads against an S3-compatible HTTP endpoint (path-style addressing).
//!
//! Requests are signed with AWS Signature Version 4 unless `SKYHOST_S3_UNSIGNED=1`.

use std::env;
use std::io::Read;
use std::time::Duration;

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

use super::{Backend, ObjectError, ObjectRef, RangeReader};

type HmacSha256 = Hmac<Sha256>;

const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

#[derive(Debug, Clone)]
pub struct S3Config {
    /// Base URL, e.g. `http://127.0.0.1:9000`.
    pub endpoint: String,
    pub region: String,
    /// `None` sends anonymous requests.
    pub credentials: Option<(String, String)>,
}

impl S3Config {
    /// `SKYHOST_S3_ENDPOINT`, `SKYHOST_S3_ACCESS_KEY`, `SKYHOST_S3_SECRET_KEY`,
    /// `SKYHOST_S3_REGION` (default `us-east-1`) and `SKYHOST_S3_UNSIGNED=1`.
    pub fn from_env() -> Result<Self, ObjectError> {
        let endpoint = env::var("SKYHOST_S3_ENDPOINT")
            .map_err(|_| ObjectError::Config("SKYHOST_S3_ENDPOINT is not set".into()))?;
        let region = env::var("SKYHOST_S3_REGION").unwrap_or_else(|_| "us-east-1".into());
        let unsigned = env::var("SKYHOST_S3_UNSIGNED").is_ok_and(|v| v == "1");
        let credentials = if unsigned {
            None
        } else {
            let ak = env::var("SKYHOST_S3_ACCESS_KEY");
            let sk = env::var("SKYHOST_S3_SECRET_KEY");
            match (ak, sk) {
                (Ok(a), Ok(s)) => Some((a, s)),
                _ => {
                    return Err(ObjectError::Auth(
                        "SKYHOST_S3_ACCESS_KEY and SKYHOST_S3_SECRET_KEY are required \
                         (or SKYHOST_S3_UNSIGNED=1)"
                            .into(),
                    ))
                }
            }
        };
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            region,
            credentials,
        })
    }
}

/// Inputs to a SigV4 header signature.
pub struct SigningInput<'a> {
    pub method: &'a str,
    pub host: &'a str,
    /// Already-encoded absolute path.
    pub path: &'a str,
    /// Extra headers to sign besides host, x-amz-content-sha256 and x-amz-date.
    pub headers: &'a [(&'a str, &'a str)],
    pub payload_sha256: &'a str,
    /// `YYYYMMDDTHHMMSSZ`
    pub amz_date: &'a str,
    pub region: &'a str,
    pub access_key: &'a str,
    pub secret_key: &'a str,
}

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.finalize().into_bytes().to_vec()
}

/// The `Authorization` header value for a request without query parameters.
pub fn sign_v4(input: &SigningInput<'_>) -> String {
    let mut headers: Vec<(String, String)> = vec![
        ("host".into(), input.host.trim().to_string()),
        ("x-amz-content-sha256".into(), input.payload_sha256.to_string()),
        ("x-amz-date".into(), input.amz_date.to_string()),
    ];
    headers.extend(
        input
            .headers
            .iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v.trim().to_string())),
    );
    headers.sort();
    let signed: Vec<&str> = headers.iter().map(|(k, _)| k.as_str()).collect();
    let signed = signed.join(";");
    let canonical_headers: String = headers.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
    let canonical_request = format!(
        "{}\n{}\n\n{}\n{}\n{}",
        input.method, input.path, canonical_headers, signed, input.payload_sha256
    );
    let date = &input.amz_date[..8];
    let scope = format!("{date}/{}/s3/aws4_request", input.region);
    let to_sign = format!(
        "AWS4-HMAC-SHA256\n{}\n{scope}\n{}",
        input.amz_date,
        hex::encode(Sha256::digest(canonical_request.as_bytes()))
    );
    let k_date = hmac(format!("AWS4{}", input.secret_key).as_bytes(), date.as_bytes());
    let k_region = hmac(&k_date, input.region.as_bytes());
    let k_service = hmac(&k_region, b"s3");
    let k_signing = hmac(&k_service, b"aws4_request");
    let signature = hex::encode(hmac(&k_signing, to_sign.as_bytes()));
    format!(
        "AWS4-HMAC-SHA256 Credential={}/{scope}, SignedHeaders={signed}, Signature={signature}",
        input.access_key
    )
}

fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub struct S3Object {
    config: S3Config,
    agent: ureq::Agent,
    host: String,
    path: String,
    object: ObjectRef,
}

impl S3Object {
    /// Resolve the object's size with a HEAD request.
    pub fn open(config: S3Config, bucket: &str, key: &str) -> Result<Self, ObjectError> {
        let host = config
            .endpoint
            .split_once("://")
            .map_or(config.endpoint.as_str(), |(_, h)| h)
            .split('/')
            .next()
            .unwrap_or_default()
            .to_string();
        let path = format!(
            "/{}/{}",
            encode_segment(bucket),
            key.split('/').map(encode_segment).collect::<Vec<_>>().join("/")
        );
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout_read(Duration::from_secs(60))
            .build();
        let mut o = Self {
            config,
            agent,
            host,
            path,
            object: ObjectRef {
                backend: Backend::S3Compatible,
                container: bucket.to_string(),
                key: key.to_string(),
                size_bytes: 0,
            },
        };
        let resp = o.call("HEAD", None)?;
        o.object.size_bytes = resp
            .header("Content-Length")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| ObjectError::SizeUnavailable(o.url()))?;
        Ok(o)
    }

    pub fn object_ref(&self) -> ObjectRef {
        self.object.clone()
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.endpoint, self.path)
    }

    fn call(&self, method: &str, range: Option<&str>) -> Result<ureq::Response, ObjectError> {
        let url = self.url();
        let mut req = self.agent.request(method, &url);
        if let Some(r) = range {
            req = req.set("Range", r);
        }
        if let Some((ak, sk)) = &self.config.credentials {
            let amz_date = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
            let extra: Vec<(&str, &str)> = range.map(|r| ("range", r)).into_iter().collect();
            let auth = sign_v4(&SigningInput {
                method,
                host: &self.host,
                path: &self.path,
                headers: &extra,
                payload_sha256: EMPTY_SHA256,
                amz_date: &amz_date,
                region: &self.config.region,
                access_key: ak,
                secret_key: sk,
            });
            req = req
                .set("x-amz-date", &amz_date)
                .set("x-amz-content-sha256", EMPTY_SHA256)
                .set("Authorization", &auth);
        }
        match req.call() {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(404, _)) => Err(ObjectError::NotFound(url)),
            Err(ureq::Error::Status(401 | 403, _)) => Err(ObjectError::Auth(url)),
            Err(ureq::Error::Status(status, _)) => Err(ObjectError::Http { status, url }),
            Err(ureq::Error::Transport(t)) => Err(ObjectError::Io(std::io::Error::other(t.to_string()))),
        }
    }
}

impl RangeReader for S3Object {
    fn read_range(&self, start: u64, len: u64) -> Result<Vec<u8>, ObjectError> {
        let range = format!("bytes={}-{}", start, start + len - 1);
        let resp = self.call("GET", Some(&range))?;
        let full = resp.status() == 200;
        let mut buf = Vec::with_capacity(len as usize);
        // read one byte past the range to notice oversized bodies
        resp.into_reader().take(len + 1).read_to_end(&mut buf)?;
        if full && len != self.object.size_bytes {
            // server ignored the Range header
            return Err(ObjectError::Range {
                start,
                expected: len,
                got: self.object.size_bytes,
            });
        }
        if buf.len() as u64 != len {
            return Err(ObjectError::Range {
                start,
                expected: len,
                got: buf.len() as u64,
            });
        }
        Ok(buf)
    }
}
