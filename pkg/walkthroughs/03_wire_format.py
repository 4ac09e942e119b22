"""
What goes over the wire
=======================

One JSON object per line. The envelope carries msgType, msgId and sender;
the body fields sit next to them.
"""

from raftws.wire import AppendEntriesReq, DecodeError, Entry, InsertCommandReq, Message, decode, encode

req = Message(body=InsertCommandReq("7c0e6a2e-1111-4222-8333-444455556666", "PUT", ["color", "blue"]),
              msg_id="m-1", sender="client-a")
frame = encode(req)
print(frame)
print(decode(frame) == req)

# Heartbeats are AppendEntries with no entries.
hb = Message(body=AppendEntriesReq(term=3, leader_id="s1", prev_log_index=4, prev_log_term=2,
                                   entries=[], leader_commit=4), msg_id="m-2", sender="s1")
print(encode(hb))

# A real append carries entries with their own terms and uids.
ent = Entry(index=5, term=3, uid="u-9", command="DEL", parameters=["color"])
print(encode(Message(body=AppendEntriesReq(3, "s1", 4, 2, [ent], 4), msg_id="m-3", sender="s1")))

# Anything malformed is rejected, never half-parsed.
for bad in (b"{}\n", b'{"msgType": "Nope", "msgId": "x", "sender": "y"}\n', b"not json\n"):
    try:
        decode(bad)
    except DecodeError as exc:
        print("rejected:", exc)
