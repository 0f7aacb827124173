import bencodepy
import pytest

from bt_scan_tools.capture import PacketRecord, Proto
from bt_scan_tools.dht import (
    AdhtConfig,
    AdhtTransactionTable,
    SignatureError,
    SignatureTable,
    Signature,
    adht_match_reply,
    adht_parse_reply,
    adht_parse_request,
    adht_register,
    btudp_match,
    mdht_extract,
)
from bt_scan_tools.synth import adht_reply, adht_request, mdht_response, utp_syn

CLIENT = ("10.2.0.1", 40001)
NODE = ("198.51.100.13", 7000)
CONNECTION_ID = (1 << 63) | 0x1234
PEERS = [("100.64.0.1", 6881), ("100.64.0.2", 51413)]


@pytest.mark.parametrize("version", [8, 12, 20, 26])
def test_adht_parse_request_versions(udp, version):
    """Test requests under every header layout."""
    payload = adht_request(
        CONNECTION_ID, 1024, 77, version, CLIENT, instance_id=5, time=123456, vendor_id=3, network_id=9
    )
    request = adht_parse_request(udp(1.0, *CLIENT, *NODE, payload))
    assert request is not None
    assert request.connection_id == CONNECTION_ID
    assert (request.action, request.transaction_id, request.protocol_version) == (1024, 77, version)
    assert request.node_address == CLIENT
    assert (request.instance_id, request.time) == (5, 123456)

    # Optional fields appear from their first protocol version on
    assert request.vendor_id == (3 if version >= 13 else None)
    assert request.network_id == (9 if version >= 9 else None)
    assert request.local_protocol_version == (version if version >= 24 else None)


def test_adht_parse_request_rejects(udp, tcp):
    """Test the plausibility checks on requests."""
    payload = adht_request(CONNECTION_ID, 1024, 77, 20, CLIENT)
    assert adht_parse_request(udp(1.0, *CLIENT, *NODE, payload)) is not None

    # Connection id without its most significant bit
    clear = adht_request(0x1234, 1024, 77, 20, CLIENT)
    assert adht_parse_request(udp(1.0, *CLIENT, *NODE, clear)) is None

    # Version outside the configured range
    assert adht_parse_request(udp(1.0, *CLIENT, *NODE, payload), AdhtConfig(max_version=10)) is None

    # Node address not echoing the source port
    assert adht_parse_request(udp(1.0, CLIENT[0], 40002, *NODE, payload)) is None

    # Truncated and non-UDP packets
    assert adht_parse_request(udp(1.0, *CLIENT, *NODE, payload[:25])) is None
    assert adht_parse_request(udp(1.0, *CLIENT, *NODE, payload[:10])) is None
    assert adht_parse_request(tcp(1.0, *CLIENT, *NODE, "A", payload)) is None


def test_adht_register():
    """Test that only find requests are registered."""
    table = AdhtTransactionTable()
    request = adht_parse_request_from(1024, 1)
    assert adht_register(request, CLIENT[0], table, 1.0)
    assert not adht_register(adht_parse_request_from(1, 2), CLIENT[0], table, 1.0)
    assert len(table) == 1


def adht_parse_request_from(action, transaction_id):
    payload = adht_request(CONNECTION_ID, action, transaction_id, 26, CLIENT)
    return adht_parse_request(PacketRecord(1.0, *CLIENT, *NODE, Proto.UDP, payload=payload))


@pytest.mark.parametrize("version", [8, 12, 20, 26])
def test_adht_find_node_reply(udp, version):
    """Test that a find-node reply is matched to its requester."""
    table = AdhtTransactionTable()
    request = adht_parse_request(udp(1.0, *CLIENT, *NODE, adht_request(CONNECTION_ID, 1024, 77, version, CLIENT)))
    adht_register(request, CLIENT[0], table, 1.0)

    reply = adht_reply(1025, 77, CONNECTION_ID, version, contacts=PEERS)
    assert adht_match_reply(udp(1.1, *NODE, *CLIENT, reply), table) == (CLIENT[0], PEERS)


@pytest.mark.parametrize("version", [8, 26])
def test_adht_find_value_reply(udp, version):
    """Test find-value replies carrying values and carrying contacts."""
    table = AdhtTransactionTable()
    for transaction_id in (1, 2):
        payload = adht_request(CONNECTION_ID, 1030, transaction_id, version, CLIENT)
        adht_register(adht_parse_request(udp(1.0, *CLIENT, *NODE, payload)), CLIENT[0], table, 1.0)

    with_values = adht_reply(1031, 1, CONNECTION_ID, version, values=PEERS)
    assert adht_parse_reply(udp(1.1, *NODE, *CLIENT, with_values), table) == PEERS

    with_contacts = adht_reply(1031, 2, CONNECTION_ID, version, contacts=PEERS[:1])
    assert adht_parse_reply(udp(1.1, *NODE, *CLIENT, with_contacts), table) == PEERS[:1]


def test_adht_reply_not_matched(udp):
    """Test replies that answer no pending request."""
    table = AdhtTransactionTable(AdhtConfig(table_ttl=60.0))
    payload = adht_request(CONNECTION_ID, 1024, 77, 20, CLIENT)
    adht_register(adht_parse_request(udp(1.0, *CLIENT, *NODE, payload)), CLIENT[0], table, 1.0)

    # Unknown transaction id
    other = adht_reply(1025, 78, CONNECTION_ID, 20, contacts=PEERS)
    assert adht_match_reply(udp(1.1, *NODE, *CLIENT, other), table) is None
    # Wrong connection id
    wrong_id = adht_reply(1025, 77, CONNECTION_ID + 1, 20, contacts=PEERS)
    assert adht_match_reply(udp(1.1, *NODE, *CLIENT, wrong_id), table) is None
    # Wrong reply action
    wrong_action = adht_reply(1031, 77, CONNECTION_ID, 20, contacts=PEERS)
    assert adht_match_reply(udp(1.1, *NODE, *CLIENT, wrong_action), table) is None
    # After the transaction expired
    reply = adht_reply(1025, 77, CONNECTION_ID, 20, contacts=PEERS)
    assert adht_match_reply(udp(62.0, *NODE, *CLIENT, reply), table) is None
    assert len(table) == 0


def test_adht_reply_skips_non_udp_contacts(udp):
    """Test that contacts of other transport types are not followed."""
    table = AdhtTransactionTable()
    payload = adht_request(CONNECTION_ID, 1024, 77, 8, CLIENT)
    adht_register(adht_parse_request(udp(1.0, *CLIENT, *NODE, payload)), CLIENT[0], table, 1.0)

    reply = adht_reply(1025, 77, CONNECTION_ID, 8, contacts=PEERS)
    # The first contact starts right after the count; mark it as a TCP contact
    first_contact = len(reply) - 2 * 9
    reply = reply[:first_contact] + b"\x02" + reply[first_contact + 1 :]
    assert adht_parse_reply(udp(1.1, *NODE, *CLIENT, reply), table) == PEERS[1:]


def test_adht_table_capacity():
    """Test that the least recently used transaction is evicted."""
    table = AdhtTransactionTable(AdhtConfig(table_capacity=2))
    for transaction_id in (1, 2, 3):
        table.register(adht_parse_request_from(1024, transaction_id), CLIENT[0], 1.0)
    assert len(table) == 2
    assert table.lookup(1, 1.0) is None
    assert table.lookup(3, 1.0).requester == CLIENT[0]


def test_adht_config_validation():
    """Test that invalid ADHT settings are rejected."""
    with pytest.raises(ValueError):
        AdhtConfig(min_version=10, max_version=5)
    with pytest.raises(ValueError):
        AdhtConfig(table_ttl=0)


def test_mdht_extract(udp):
    """Test values and nodes of a get_peers response."""
    nodes = [("198.51.100.100", 6881), ("198.51.100.101", 6882)]
    payload = mdht_response(PEERS, nodes)
    extracted = mdht_extract(udp(1.0, "198.51.100.12", 6881, *CLIENT, payload))

    # Cross-check against an independent bencode decoder
    reply = bencodepy.decode(payload)[b"r"]
    assert len(reply[b"values"]) == len(PEERS)
    assert len(reply[b"nodes"]) == 26 * len(nodes)
    assert extracted == PEERS + nodes


def test_mdht_extract_without_markers(udp):
    """Test that queries and unrelated payloads yield nothing."""
    query = bencodepy.encode({b"a": {b"id": bytes(20)}, b"q": b"ping", b"t": b"aa", b"y": b"q"})
    assert mdht_extract(udp(1.0, *CLIENT, "198.51.100.12", 6881, query)) == []
    assert mdht_extract(udp(1.0, *CLIENT, "198.51.100.12", 6881, b"")) == []
    # Malformed values entries are skipped
    odd = bencodepy.encode({b"r": {b"values": [b"short", 5]}})
    assert mdht_extract(udp(1.0, *CLIENT, "198.51.100.12", 6881, odd)) == []


def test_signature_parse():
    """Test signature lines."""
    signature = Signature.parse("utp-syn len==20 4100????")
    assert signature == Signature("utp-syn", "==", 20, (0x41, 0x00, None, None))
    assert signature.matches(utp_syn(7))
    assert not signature.matches(utp_syn(7) + b"\x00")
    assert not signature.matches(b"\x21" + utp_syn(7)[1:])

    assert Signature.parse("any  len>=2  ff").matches(b"\xff\x00\x01")
    assert not Signature.parse("any len<2 ff").matches(b"\xff\x00")

    with pytest.raises(SignatureError):
        Signature.parse("broken len=20 41")
    with pytest.raises(SignatureError):
        Signature.parse("too-long len==100 " + "00" * 65)


def test_signature_longer_prefix():
    """Test that patterns longer than four bytes match as prefixes."""
    table = SignatureTable.from_lines(["mdht-query len==33 64313a61????"])
    signature = table.signatures[0]
    assert signature.pattern == (0x64, 0x31, 0x3A, 0x61, None, None)
    assert table.match(b"d1:ad2:id" + bytes(24)).name == "mdht-query"
    assert table.match(b"d1:ad2:id" + bytes(23)) is None
    assert table.match(b"d1:r" + bytes(29)) is None
    # Never longer than the payload it matches
    assert not Signature.parse("six len>=1 010203040506").matches(b"\x01\x02\x03")


def test_signature_table(tmp_path):
    """Test signature files with comments and bad lines."""
    path = tmp_path / "signatures.txt"
    path.write_text("# comment\n\nfirst len==4 01??  # trailing comment\nsecond len>3 02\n")
    table = SignatureTable.load(str(path))
    assert len(table) == 2
    assert table.match(b"\x01\x99\x00\x00").name == "first"
    assert table.match(b"\x02\x00\x00\x00").name == "second"
    assert table.match(b"\x03\x00\x00\x00") is None

    with pytest.raises(SignatureError) as excinfo:
        SignatureTable.from_lines(["first len==4 01", "oops"])
    assert excinfo.value.lineno == 2


def test_btudp_match(udp, tcp):
    """Test the default signatures on uTP and DHT ping packets."""
    table = SignatureTable.default()
    assert btudp_match(udp(1.0, *CLIENT, "100.64.0.1", 6881, utp_syn(3)), table)

    ping = bencodepy.encode({b"a": {b"id": bytes(20)}, b"q": b"ping", b"t": b"aa", b"y": b"q"})
    assert len(ping) == 56
    assert btudp_match(udp(1.0, *CLIENT, "100.64.0.1", 6881, ping), table)

    assert not btudp_match(udp(1.0, *CLIENT, "100.64.0.1", 6881, b"\x00" * 20), table)
    assert not btudp_match(tcp(1.0, *CLIENT, "100.64.0.1", 6881, "A", utp_syn(3)), table)
