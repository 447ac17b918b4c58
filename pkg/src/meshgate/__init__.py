"""meshgate: a software testbed bridging a simulated 6LoWPAN sensor mesh to IPv4 clients.

The pieces, bottom up:

- netmodel     frame/packet codecs (link frames, IPv6/IPv4, serial tunnel framing)
- sixlowpan    fragmentation, reassembly, prefix-elision compression
- transport    mini-TCP: reliable stop-and-wait byte streams
- sim          deterministic discrete-event simulator with a contention channel
- aodv         on-demand mesh routing (RREQ/RREP/RERR)
- mote         simulated sensor node: sensing, telemetry client, command server
- sink         mesh/serial bridge node
- addrmap      bijective stateless IPv4<->IPv6 address mapping
- gateway      packet translation, telemetry ingestion, store-and-forward buffer
- middleware   HTTP/JSON query+command service with automation rules
- world        wires a scenario into a running simulated network
- experiments  traffic delay/jitter and translation-latency experiments
- cli          entry point
"""

__version__ = "0.1.0"
