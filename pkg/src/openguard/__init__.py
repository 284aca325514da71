"""Open-file snapshot defense against encrypting processes.

Files in a protected scope are copied to a ``.tmp`` sibling the first time a
process opens them, while the opener is suspended. A separate detection
pipeline classifies processes from their open behaviour; on a malicious
verdict the process tree is killed and the snapshots are restored.
"""

__version__ = "0.1.0"
