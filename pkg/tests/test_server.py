"""Authentication server decisions, conversation state and the UDP front."""

import itertools
import logging
import socket

import pytest

from conftest import PATCHED_BLOB, WGET_BLOB, identity, make_store
from sim import SECRET, FakeClock
from xrac.eap import (
    EapPacket, EapType, encode_container_identity, md5_challenge_data, md5_challenge_response,
    parse_md5_challenge_data,
)
from xrac.radius import (
    MESSAGE_AUTHENTICATOR, STATE, RadiusAttribute, RadiusCode, RadiusPacket, decode_radius,
    eap_attributes, encode_radius, parse_cazd,
)
from xrac.server import AsService, AuthServer, Decision
from xrac.store import GroupBinding, dump_store

MA = RadiusAttribute(MESSAGE_AUTHENTICATOR, bytes(16))
REQ_AUTH = bytes(range(16))


def identity_request(ci, eap_id=1, rid=1):
    eap = EapPacket.response(eap_id, EapType.IDENTITY, encode_container_identity(ci).encode())
    return RadiusPacket(RadiusCode.ACCESS_REQUEST, rid, REQ_AUTH, (*eap_attributes(eap), MA))


def md5_request(challenge_reply, password, rid=2, corrupt=False):
    eap = challenge_reply.eap_message()
    challenge, _ = parse_md5_challenge_data(eap.type_data)
    value = md5_challenge_response(eap.identifier, password, challenge)
    if corrupt:
        value = bytes([value[0] ^ 1]) + value[1:]
    resp = EapPacket.response(eap.identifier, EapType.MD5_CHALLENGE, md5_challenge_data(value))
    attrs = (*eap_attributes(resp), RadiusAttribute(STATE, challenge_reply.first(STATE)), MA)
    return RadiusPacket(RadiusCode.ACCESS_REQUEST, rid, REQ_AUTH, attrs)


def converse(server, ci, password):
    challenge = server.handle_access_request(identity_request(ci))
    assert challenge.code is RadiusCode.ACCESS_CHALLENGE
    return server.handle_access_request(md5_request(challenge, password))


def store_for(allowed: bool):
    images = {"wget", "offline"} if allowed else {"offline"}
    return make_store(groups=[GroupBinding("staff", frozenset({"alice"}), frozenset(images))])


@pytest.mark.parametrize("user_ok,image_ok,allowed", list(itertools.product([True, False], repeat=3)))
def test_decision_table(user_ok, image_ok, allowed):
    server = AuthServer(store_for(allowed))
    ci = identity(blob=WGET_BLOB if image_ok else PATCHED_BLOB)
    reply = converse(server, ci, b"wonderland" if user_ok else b"wonderlant")
    if user_ok and image_ok and allowed:
        assert reply.code is RadiusCode.ACCESS_ACCEPT
        assert reply.eap_message().code.name == "SUCCESS"
        cazd = parse_cazd(reply.attributes)
        assert cazd.rac_address == ci.rac_address and len(cazd.allowed_peers) == 1
    else:
        assert reply.code is RadiusCode.ACCESS_REJECT
        assert reply.eap_message().code.name == "FAILURE"
        assert parse_cazd(reply.attributes).empty
    assert server.decisions[-1].outcome == ("accept" if reply.code is RadiusCode.ACCESS_ACCEPT
                                            else "reject")


def test_rejects_are_indistinguishable():
    """Every failed check yields byte-identical replies."""
    cases = [
        (store_for(True), identity(), b"wrong"),
        (store_for(True), identity(blob=PATCHED_BLOB), b"wonderland"),
        (store_for(False), identity(), b"wonderland"),
        (store_for(True), identity(user="mallory"), b"wonderland"),
        (store_for(True), identity(image="chrome"), b"wonderland"),
    ]
    wires = set()
    for store, ci, pw in cases:
        server = AuthServer(store, random_bytes=lambda n: bytes(n))
        reply = converse(server, ci, pw)
        wires.add(encode_radius(reply, SECRET, request_authenticator=REQ_AUTH))
    assert len(wires) == 1


def test_reasons_logged(caplog):
    server = AuthServer(store_for(True))
    with caplog.at_level(logging.INFO, logger="xrac.as"):
        converse(server, identity(), b"nope")
        converse(server, identity(), b"wonderland")
    assert "decision user=alice image=wget outcome=reject reason=user" in caplog.text
    assert "decision user=alice image=wget outcome=accept reason=ok" in caplog.text


def test_decision_log_line():
    assert Decision(None, None, "reject", "state").log_line() == \
        "decision user=- image=- outcome=reject reason=state"


def test_challenges_unique():
    server = AuthServer(make_store())
    challenges, tokens = set(), set()
    req = identity_request(identity())
    for _ in range(10_000):
        reply = server.handle_access_request(req)
        challenges.add(parse_md5_challenge_data(reply.eap_message().type_data)[0])
        tokens.add(reply.first(STATE))
    assert len(challenges) == len(tokens) == 10_000


def test_challenge_identifier_advances():
    reply = AuthServer(make_store()).handle_access_request(identity_request(identity(), eap_id=255))
    assert reply.eap_message().identifier == 0


def test_unknown_state_rejected():
    server = AuthServer(make_store())
    challenge = server.handle_access_request(identity_request(identity()))
    forged = RadiusPacket(challenge.code, challenge.identifier, challenge.authenticator,
                          tuple(a if a.attr_type != STATE else RadiusAttribute(STATE, bytes(16))
                                for a in challenge.attributes))
    assert server.handle_access_request(md5_request(forged, b"wonderland")).code \
        is RadiusCode.ACCESS_REJECT
    assert server.decisions[-1].reason == "state"


def test_replay_rejected():
    server = AuthServer(make_store())
    challenge = server.handle_access_request(identity_request(identity()))
    req = md5_request(challenge, b"wonderland")
    assert server.handle_access_request(req).code is RadiusCode.ACCESS_ACCEPT
    assert server.handle_access_request(req).code is RadiusCode.ACCESS_REJECT
    assert server.decisions[-1].reason == "replay"


def test_conversation_expires():
    clock = FakeClock()
    server = AuthServer(make_store(), clock=clock, timeout=30)
    challenge = server.handle_access_request(identity_request(identity()))
    clock.t += 31
    reply = server.handle_access_request(md5_request(challenge, b"wonderland"))
    assert reply.code is RadiusCode.ACCESS_REJECT
    assert server.conversation_count() == 0


@pytest.mark.parametrize("eap", [
    EapPacket.request(1, EapType.IDENTITY, b"x"),
    EapPacket.response(1, EapType.MD5_CHALLENGE, md5_challenge_data(bytes(16))),
    EapPacket.response(1, EapType.IDENTITY, b"user=alice"),
    EapPacket.response(1, EapType.IDENTITY, b"\xff\xfe"),
])
def test_protocol_errors_rejected(eap):
    req = RadiusPacket(RadiusCode.ACCESS_REQUEST, 1, REQ_AUTH, (*eap_attributes(eap), MA))
    reply = AuthServer(make_store()).handle_access_request(req)
    assert reply.code is RadiusCode.ACCESS_REJECT


def test_wrong_method_in_second_round():
    server = AuthServer(make_store())
    challenge = server.handle_access_request(identity_request(identity()))
    nak = EapPacket.response(challenge.eap_message().identifier, EapType.NAK, b"\x04")
    req = RadiusPacket(RadiusCode.ACCESS_REQUEST, 2, REQ_AUTH,
                       (*eap_attributes(nak), RadiusAttribute(STATE, challenge.first(STATE)), MA))
    assert server.handle_access_request(req).code is RadiusCode.ACCESS_REJECT


def test_reload_changes_outcome():
    server = AuthServer(store_for(False))
    assert converse(server, identity(), b"wonderland").code is RadiusCode.ACCESS_REJECT
    server.reload(store_for(True))
    assert converse(server, identity(), b"wonderland").code is RadiusCode.ACCESS_ACCEPT


# -- UDP service ----------------------------------------------------------------


@pytest.fixture
def as_service(tmp_path):
    svc = AsService(("127.0.0.1", 0), SECRET, store=make_store(),
                    log_path=tmp_path / "as.log").start()
    yield svc
    svc.stop()


@pytest.fixture
def udp():
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(2)
    yield sock
    sock.close()


def test_service_roundtrip_and_duplicates(as_service, udp):
    wire = encode_radius(identity_request(identity()), SECRET)
    udp.sendto(wire, as_service.address)
    first = udp.recv(4096)
    udp.sendto(wire, as_service.address)
    second = udp.recv(4096)
    assert first == second
    assert as_service.counters.duplicates == 1
    reply = decode_radius(first, SECRET, expected_request_auth=REQ_AUTH)
    assert reply.code is RadiusCode.ACCESS_CHALLENGE
    assert as_service.server.conversation_count() == 1


def test_service_drops_garbage_and_bad_secret(as_service, udp):
    udp.sendto(b"\x01\x02garbage", as_service.address)
    udp.sendto(encode_radius(identity_request(identity()), b"other"), as_service.address)
    reply = RadiusPacket(RadiusCode.ACCESS_ACCEPT, 1)
    udp.sendto(encode_radius(reply, SECRET, request_authenticator=REQ_AUTH), as_service.address)
    with pytest.raises(socket.timeout):
        udp.settimeout(0.5)
        udp.recv(4096)
    # the stray Accept carries no Message-Authenticator, which the AS requires
    assert as_service.counters.malformed == 1
    assert as_service.counters.bad_authenticator == 2
    assert as_service.counters.replies == 0


def test_service_reload_and_log(tmp_path, udp):
    path = tmp_path / "aa.conf"
    path.write_text(dump_store(store_for(False)))
    svc = AsService(("127.0.0.1", 0), SECRET, path, log_path=tmp_path / "as.log").start()
    try:
        assert converse(svc.server, identity(), b"wonderland").code is RadiusCode.ACCESS_REJECT
        path.write_text(dump_store(store_for(True)))
        svc.reload()
        assert converse(svc.server, identity(), b"wonderland").code is RadiusCode.ACCESS_ACCEPT
    finally:
        svc.stop()
    text = (tmp_path / "as.log").read_text()
    assert "reason=permission" in text and "outcome=accept" in text
