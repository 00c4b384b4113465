"""Authenticated and authorized restricted application containers.

A container may only run, and only reach the network resources granted to
it, after its user and its image digest have been checked by an
authentication server over EAP (EAPoUDP on the host, RADIUS to the server).
"""

__version__ = "0.1.0"
