use std::borrow::Cow;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use svchange::error::ClientError;
use svchange::geo::{haversine_distance, FootprintPolygon, PanoMetadata, YearMonth};
use svchange::metadata::{build_scene_series, HttpMetadataClient, MetadataClient, SceneOutcome};
use svchange::{detect_series, DecoderConfig, EmbeddingProvider, GeoPoint, PairScorer, StreetImage, StreetViewSeries};

const CENTER: GeoPoint = GeoPoint { lat: 47.6100, lon: -122.3300 };

fn footprint() -> FootprintPolygon {
    let d = 0.0001;
    let p = |a: f64, b: f64| GeoPoint { lat: CENTER.lat + a, lon: CENTER.lon + b };
    FootprintPolygon {
        building_id: "bldg-1".into(),
        exterior: vec![p(-d, -d), p(-d, d), p(d, d), p(d, -d), p(-d, -d)],
        holes: vec![],
    }
}

fn pano(id: &str, dlat: f64, dlon: f64, date: &str) -> PanoMetadata {
    PanoMetadata {
        panoid: id.into(),
        location: GeoPoint { lat: CENTER.lat + dlat, lon: CENTER.lon + dlon },
        capture_date: date.parse().unwrap(),
    }
}

struct Canned(Vec<PanoMetadata>);

impl MetadataClient for Canned {
    fn query(&self, point: GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, ClientError> {
        Ok(self
            .0
            .iter()
            .filter(|p| haversine_distance(point, p.location) <= radius_m)
            .cloned()
            .collect())
    }
}

fn unit(p: GeoPoint) -> [f64; 3] {
    let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

fn bearing_oracle(from: GeoPoint, to: GeoPoint) -> f64 {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (u, v) = (unit(from), unit(to));
    let (la, lo) = (from.lat.to_radians(), from.lon.to_radians());
    let east = [-lo.sin(), lo.cos(), 0.0];
    let north = [-la.sin() * lo.cos(), -la.sin() * lo.sin(), la.cos()];
    let d = dot(u, v);
    let t = [v[0] - d * u[0], v[1] - d * u[1], v[2] - d * u[2]];
    dot(t, east).atan2(dot(t, north)).to_degrees().rem_euclid(360.0)
}

#[test]
fn one_image_per_month_facing_the_building() {
    let client = Canned(vec![
        pano("far-2010", 0.0002, 0.0, "2010-06"),
        pano("near-2010", 0.0, 0.00015, "2010-06"),
        pano("p-2014", -0.0002, 0.0001, "2014-09"),
        pano("p-2019", 0.0001, -0.0002, "2019-03"),
        pano("out-of-range", 0.01, 0.0, "2012-01"),
    ]);
    let SceneOutcome::Series(series) = build_scene_series(&footprint(), &client, 50.0).unwrap() else {
        panic!("expected a series");
    };
    let ids: Vec<_> = series.images().iter().map(|i| i.image_id.as_str()).collect();
    assert_eq!(ids, ["near-2010", "p-2014", "p-2019"]);
    assert_eq!(series.images()[1].timestamp, NaiveDate::from_ymd_opt(2014, 9, 1).unwrap());
    let target = series.target_point();
    assert!(haversine_distance(target, CENTER) < 0.01);
    for img in series.images() {
        let want = bearing_oracle(img.capture_point, target);
        let d = (img.heading - want).rem_euclid(360.0);
        assert!(d.min(360.0 - d) < 1e-6, "{} {} vs {want}", img.image_id, img.heading);
    }
    assert!(series.change_points().is_empty());
}

#[test]
fn no_panoramas_is_reported_not_fatal() {
    let outcome = build_scene_series(&footprint(), &Canned(vec![]), 50.0).unwrap();
    assert!(matches!(outcome, SceneOutcome::Empty { ref building_id, .. } if building_id == "bldg-1"));
}

#[test]
fn panorama_reused_across_months_appears_once() {
    // the same capture listed under two months
    let client = Canned(vec![
        pano("shared", 0.0, 0.0001, "2011-01"),
        pano("shared", 0.0, 0.0001, "2011-02"),
        pano("other", 0.0, -0.0002, "2015-05"),
    ]);
    let SceneOutcome::Series(series) = build_scene_series(&footprint(), &client, 50.0).unwrap() else {
        panic!("expected a series");
    };
    let ids: Vec<_> = series.images().iter().map(|i| i.image_id.as_str()).collect();
    assert_eq!(ids, ["shared", "other"]);
}

fn serve(responses: Vec<(u16, &'static str)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/meta", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h == "\r\n" || h.is_empty() {
                    break;
                }
            }
            seen.push(request_line);
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn http_adapter_maps_statuses() {
    let (url, server) = serve(vec![
        (200, r#"{"results": [{"panoid": "a", "lat": 47.61, "lon": -122.33, "date": "2012-07"}]}"#),
        (429, ""),
        (503, ""),
        (404, ""),
        (200, "not json"),
    ]);
    let client = HttpMetadataClient::new(url, Some("k3y".into()));
    let ok = client.query(CENTER, 50.0).unwrap();
    assert_eq!(ok.len(), 1);
    assert_eq!(ok[0].capture_date, YearMonth { year: 2012, month: 7 });
    assert!(client.query(CENTER, 50.0).unwrap_err().retryable);
    assert!(client.query(CENTER, 50.0).unwrap_err().retryable);
    assert!(!client.query(CENTER, 50.0).unwrap_err().retryable);
    assert!(!client.query(CENTER, 50.0).unwrap_err().retryable);
    let requests = server.join().unwrap();
    assert!(requests[0].starts_with("GET /meta?"));
    for part in ["lat=47.61", "lon=-122.33", "radius=50", "key=k3y"] {
        assert!(requests[0].contains(part), "{}", requests[0]);
    }
}

#[test]
fn unreachable_server_is_retryable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = HttpMetadataClient::new(format!("http://127.0.0.1:{port}/"), None);
    assert!(client.query(CENTER, 50.0).unwrap_err().retryable);
}

struct Counting {
    calls: AtomicUsize,
    seen: Mutex<Vec<(f32, f32)>>,
}

impl PairScorer for Counting {
    fn score_pair(&self, h_later: &[f32], h_earlier: &[f32]) -> svchange::Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().unwrap().push((h_later[0], h_earlier[0]));
        Ok(if h_later[0] >= 6.0 && h_earlier[0] < 6.0 { 0.99 } else { 0.01 })
    }
}

struct IndexEmbedding;

impl EmbeddingProvider for IndexEmbedding {
    fn dim(&self) -> usize {
        1
    }

    fn get(&self, image_id: &str) -> svchange::Result<Cow<'_, [f32]>> {
        Ok(Cow::Owned(vec![image_id.trim_start_matches('i').parse().unwrap()]))
    }
}

#[test]
fn detection_scores_each_chronological_pair_once() {
    let images = (1..=10)
        .map(|k| StreetImage {
            image_id: format!("i{k}"),
            timestamp: NaiveDate::from_ymd_opt(2008 + k, 1, 1).unwrap(),
            panoid: format!("i{k}"),
            heading: 0.0,
            capture_point: CENTER,
        })
        .collect();
    let series = StreetViewSeries::new("s", CENTER, images, vec![]).unwrap();
    let scorer = Counting { calls: AtomicUsize::new(0), seen: Mutex::new(vec![]) };
    let det = detect_series(&scorer, &IndexEmbedding, &series, &DecoderConfig::default()).unwrap();
    assert_eq!(scorer.calls.load(Ordering::SeqCst), 45);
    assert!(scorer.seen.lock().unwrap().iter().all(|(later, earlier)| later > earlier));
    assert_eq!(det.change_points, vec![6]);
    assert_eq!(det.change_timestamps, vec![NaiveDate::from_ymd_opt(2014, 1, 1).unwrap()]);
}
