"""Supplicant state machine, driven frame by frame and over lossy links."""

import random

import pytest

from conftest import PATCHED_BLOB, PROTECTED, RAC1, identity, make_store
from sim import RecordingEnforcer, Sim
from xrac.eap import (
    EapoUdpFrame, EapPacket, EapType, FrameType, decode_eap, decode_eapoudp, encode_eapoudp,
    md5_challenge_data, md5_challenge_response, parse_container_identity,
    parse_md5_challenge_data,
)
from xrac.enforcer import Whitelist
from xrac.radius import build_cazd
from xrac.supplicant import CsSession, CsState

T0 = 100.0
CHALLENGE = bytes(range(16))


def frame(packet: EapPacket) -> bytes:
    return encode_eapoudp(EapoUdpFrame.wrap(packet))


def notify(rac=RAC1, peers=(PROTECTED,)) -> bytes:
    body = b"".join(a.encode() for a in build_cazd(str(rac), list(peers), "wget"))
    return encode_eapoudp(EapoUdpFrame(FrameType.CAZD_NOTIFY, body))


def sent_eap(out):
    assert len(out) == 1
    return decode_eap(decode_eapoudp(out[0]).body)


def answered(password=b"wonderland") -> CsSession:
    cs = CsSession(identity(), password)
    cs.start(T0)
    cs.on_datagram(frame(EapPacket.request(5, EapType.IDENTITY)), T0)
    cs.on_datagram(frame(EapPacket.request(6, EapType.MD5_CHALLENGE,
                                           md5_challenge_data(CHALLENGE))), T0)
    assert cs.state is CsState.CHALLENGE_ANSWERED
    return cs


def test_happy_path_frames():
    cs = CsSession(identity(), b"wonderland")
    assert decode_eapoudp(cs.start(T0)[0]).frame_type is FrameType.START
    ident = sent_eap(cs.on_datagram(frame(EapPacket.request(5, EapType.IDENTITY)), T0))
    assert ident.identifier == 5 and ident.type_field == EapType.IDENTITY
    assert parse_container_identity(ident.type_data.decode()) == identity()
    resp = sent_eap(cs.on_datagram(frame(EapPacket.request(
        6, EapType.MD5_CHALLENGE, md5_challenge_data(CHALLENGE))), T0))
    value, _ = parse_md5_challenge_data(resp.type_data)
    assert value == md5_challenge_response(6, b"wonderland", CHALLENGE)
    assert cs.on_datagram(notify(), T0) == []
    assert cs.on_datagram(frame(EapPacket.success(6)), T0) == []
    assert cs.state is CsState.AUTHORIZED
    assert cs.cazd.allowed_peers[0].compressed == f"{PROTECTED}/128"


def test_success_before_notify():
    cs = answered()
    cs.on_datagram(frame(EapPacket.success(6)), T0)
    assert cs.state is CsState.CHALLENGE_ANSWERED
    cs.on_datagram(notify(), T0 + 1)
    assert cs.state is CsState.AUTHORIZED


def test_success_without_cazd_fails_closed():
    cs = answered()
    cs.on_datagram(frame(EapPacket.success(6)), T0)
    assert cs.on_timeout(T0 + 1.9) == []
    out = cs.on_timeout(T0 + 2.0)
    assert cs.state is CsState.FAILED and cs.reason == "cazd-missing"
    # any grant the authenticator made is released
    assert [decode_eapoudp(d).frame_type for d in out] == [FrameType.LOGOFF]


def test_failure_frame_rejects():
    cs = answered()
    assert cs.on_datagram(frame(EapPacket.failure(6)), T0) == []
    assert cs.state is CsState.FAILED and cs.reason == "rejected"


def test_success_before_challenge_is_refused():
    cs = CsSession(identity(), b"pw")
    cs.start(T0)
    cs.on_datagram(frame(EapPacket.success(1)), T0)
    assert cs.state is CsState.FAILED and cs.reason == "unexpected-success"


def test_notify_before_challenge_ignored():
    cs = CsSession(identity(), b"pw")
    cs.start(T0)
    assert cs.on_datagram(notify(), T0) == []
    assert cs.state is CsState.START_SENT and cs.cazd is None


def test_notify_for_other_address():
    cs = answered()
    cs.on_datagram(notify(rac="2001:db8::11:9"), T0)
    assert cs.state is CsState.FAILED and cs.reason == "cazd-address-mismatch"


def test_garbled_notify():
    cs = answered()
    cs.on_datagram(encode_eapoudp(EapoUdpFrame(FrameType.CAZD_NOTIFY, b"\x1a\x09\x00\x00")), T0)
    assert cs.state is CsState.FAILED and cs.reason == "bad-cazd"


@pytest.mark.parametrize("method", [EapType.NOTIFICATION, 6, 13, 254])
def test_unknown_method_gets_nak(method):
    cs = CsSession(identity(), b"pw")
    cs.start(T0)
    cs.on_datagram(frame(EapPacket.request(1, EapType.IDENTITY)), T0)
    nak = sent_eap(cs.on_datagram(frame(EapPacket.request(2, method, b"x")), T0))
    assert nak.type_field == EapType.NAK and nak.type_data == bytes([EapType.MD5_CHALLENGE])


def test_start_retransmitted_then_timeout():
    cs = CsSession(identity(), b"pw", timeout=2.0, retransmit_budget=3, final_grace=0.5)
    first = cs.start(T0)
    assert cs.on_timeout(T0 + 2) == first
    assert cs.on_timeout(T0 + 4) == first
    assert cs.on_timeout(T0 + 6) == []
    assert cs.state is CsState.START_SENT
    assert cs.on_timeout(T0 + 6.5) == []
    assert cs.state is CsState.FAILED and cs.reason == "timeout"


def test_timeout_after_answering_logs_off():
    cs = answered()
    cs.on_timeout(T0 + 2)
    cs.on_timeout(T0 + 4)
    out = cs.on_timeout(T0 + 6.5)
    assert cs.reason == "timeout"
    assert decode_eapoudp(out[0]).frame_type is FrameType.LOGOFF


def test_terminal_state_is_sticky():
    cs = answered()
    cs.on_datagram(frame(EapPacket.failure(6)), T0)
    assert cs.on_datagram(notify(), T0) == []
    assert cs.on_datagram(frame(EapPacket.success(6)), T0) == []
    assert cs.state is CsState.FAILED
    with pytest.raises(RuntimeError):
        cs.start(T0)


def test_malformed_input_ignored():
    cs = answered()
    for junk in (b"", b"\x01\x00\x00\x02\xff\xff", frame(EapPacket.response(6, 4, b"x"))):
        assert cs.on_datagram(junk, T0) == []
    assert cs.state is CsState.CHALLENGE_ANSWERED


# -- lossy links ---------------------------------------------------------------


def lossy(rng, rate):
    def drop(dst, data):
        # Logoff is the cleanup path; model it as reliable
        if dst == "ca" and decode_eapoudp(data).frame_type is FrameType.LOGOFF:
            return False
        return rng.random() < rate
    return drop


@pytest.mark.parametrize("seed", range(60))
def test_lossy_runs_keep_grants_consistent(seed):
    rng = random.Random(seed)
    wl = Whitelist()
    sim = Sim(make_store(), enforcer=RecordingEnforcer(wl), drop=lossy(rng, 0.25), seed=seed)
    cs = sim.run(CsSession(identity(), b"wonderland"))
    pair = (str(RAC1), PROTECTED)
    if cs.state is CsState.AUTHORIZED:
        assert wl.dynamic_pairs() == {pair}
    else:
        assert cs.reason in {"timeout", "rejected", "cazd-missing"}
        assert wl.dynamic_pairs() == set()


@pytest.mark.parametrize("seed", range(30))
def test_lossy_runs_never_authorize_bad_credentials(seed):
    rng = random.Random(seed)
    wl = Whitelist()
    sim = Sim(make_store(), enforcer=RecordingEnforcer(wl), drop=lossy(rng, 0.25), seed=seed)
    bad = rng.choice([CsSession(identity(), b"wrong"),
                      CsSession(identity(blob=PATCHED_BLOB), b"wonderland"),
                      CsSession(identity(user="bob"), b"builder")])
    cs = sim.run(bad)
    assert cs.state is CsState.FAILED
    assert wl.mutations == 0


def test_lossless_run_always_authorizes():
    for seed in range(20):
        sim = Sim(make_store(), seed=seed)
        assert sim.run(CsSession(identity(), b"wonderland")).state is CsState.AUTHORIZED
