use std::io::Cursor;

use proptest::prelude::*;

use stagespace::directory::ObjectDescriptor;
use stagespace::geometry::NDBox;
use stagespace::protocol::{
    encode_frame, read_frame, read_message, BarrierMsg, ErrorCode, ErrorReply, FrameError, GetRequest, Message,
    ProtocolError, PutRequest, ServerStat, HEADER_LEN,
};
use stagespace::tier::{ChunkHandle, TierStats};

fn arb_box() -> impl Strategy<Value = NDBox> {
    prop::collection::vec((0u64..1000, 1u64..50), 1..=3).prop_map(|d| {
        let lo: Vec<u64> = d.iter().map(|x| x.0).collect();
        let hi: Vec<u64> = d.iter().map(|x| x.0 + x.1).collect();
        NDBox::new(&lo, &hi).unwrap()
    })
}

fn arb_var() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_/.\u{e9}]{0,24}"
}

fn small_box() -> impl Strategy<Value = NDBox> {
    prop::collection::vec((0u64..100, 1u64..5), 1..=3).prop_map(|d| {
        let lo: Vec<u64> = d.iter().map(|x| x.0).collect();
        let hi: Vec<u64> = d.iter().map(|x| x.0 + x.1).collect();
        NDBox::new(&lo, &hi).unwrap()
    })
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (arb_var(), any::<u32>(), 1u32..9, small_box(), any::<u8>()).prop_map(|(var, version, es, bbox, fill)| {
            let n = bbox.volume() as usize * es as usize;
            Message::Put(PutRequest {
                var,
                version,
                element_size: es,
                bbox,
                data: (0..n).map(|i| fill.wrapping_add(i as u8)).collect(),
            })
        }),
        Just(Message::PutAck),
        (arb_var(), any::<u32>(), any::<u32>(), arb_box(), any::<u32>()).prop_map(
            |(var, version, element_size, bbox, timeout_ms)| Message::Get(GetRequest {
                var,
                version,
                element_size,
                bbox,
                timeout_ms,
            })
        ),
        prop::collection::vec(any::<u8>(), 0..300).prop_map(Message::GetResp),
        (arb_var(), any::<u32>(), arb_box(), any::<u32>(), any::<u32>(), any::<[u64; 3]>()).prop_map(
            |(var, version, bbox, element_size, owner, h)| Message::Notify(ObjectDescriptor {
                var,
                version,
                bbox,
                element_size,
                owner,
                handle: ChunkHandle {
                    offset: h[0],
                    length: h[1],
                    generation: h[2],
                },
            })
        ),
        Just(Message::NotifyAck),
        Just(Message::Stat),
        (any::<u32>(), any::<[u64; 10]>()).prop_map(|(server_id, c)| Message::StatResp(ServerStat {
            server_id,
            tier: TierStats {
                used_bytes: c[0],
                capacity_bytes: c[1],
                chunk_count: c[2],
                cumulative_read_bytes: c[3],
                cumulative_write_bytes: c[4],
            },
            descriptor_count: c[5],
            pending_gets: c[6],
            notify_retries: c[7],
            notify_failures: c[8],
            notify_sent: c[9],
        })),
        (any::<(u8, u8, u32, u32, u64, u64, u64, bool)>(), arb_var()).prop_map(|(b, detail)| {
            Message::Barrier(BarrierMsg {
                phase: b.0,
                role: b.1,
                client_id: b.2,
                timestep: b.3,
                start_ns: b.4,
                end_ns: b.5,
                bytes: b.6,
                ok: b.7,
                detail,
            })
        }),
        (0u16..12, arb_var()).prop_map(|(c, message)| Message::Err(ErrorReply {
            code: ErrorCode::from_u16(c),
            message,
        })),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn frames_round_trip(corr in any::<u64>(), msg in arb_message()) {
        let bytes = encode_frame(corr, &msg);
        let mut cur = Cursor::new(&bytes);
        let (c, back) = read_message(&mut cur).unwrap().unwrap();
        prop_assert_eq!(c, corr);
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(cur.position() as usize, bytes.len());
        prop_assert!(read_message(&mut cur).unwrap().is_none());
        let frame = read_frame(&mut Cursor::new(&bytes)).unwrap().unwrap();
        prop_assert_eq!(frame.decode().unwrap(), frame.into_message().unwrap());
    }

    /// Any strict prefix of a frame is reported as truncated, never as a message.
    #[test]
    fn prefixes_are_truncated(msg in arb_message(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_frame(1, &msg);
        let n = 1 + cut.index(bytes.len() - 1);
        let r = read_frame(&mut Cursor::new(&bytes[..n]));
        prop_assert!(matches!(r, Err(FrameError::Truncated)), "{:?}", r);
    }

    #[test]
    fn streams_of_frames_decode_in_order(msgs in prop::collection::vec(arb_message(), 1..20)) {
        let mut stream = Vec::new();
        for (i, m) in msgs.iter().enumerate() {
            stream.extend(encode_frame(i as u64, m));
        }
        let mut cur = Cursor::new(stream);
        for (i, m) in msgs.iter().enumerate() {
            let (c, back) = read_message(&mut cur).unwrap().unwrap();
            prop_assert_eq!(c, i as u64);
            prop_assert_eq!(&back, m);
        }
    }
}

#[test]
fn bad_magic_is_a_frame_error() {
    let mut bytes = encode_frame(3, &Message::Stat);
    bytes[0] = b'X';
    assert!(matches!(
        read_message(&mut Cursor::new(bytes)),
        Err(ProtocolError::Frame(FrameError::BadMagic(_)))
    ));
}

#[test]
fn empty_stream_is_clean_eof() {
    assert!(read_frame(&mut Cursor::new(Vec::<u8>::new())).unwrap().is_none());
    assert_eq!(encode_frame(0, &Message::PutAck).len(), HEADER_LEN);
}
