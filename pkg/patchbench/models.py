"""
Database models για το run history.

Κάθε εκτέλεση μιας εντολής του CLI γράφει μία γραμμή στο runs.
"""

from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.sql import func

from .database import Base


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)

    # train, eval, matrix, analyze tsne, ...
    command = Column(String(50), nullable=False)

    # sha256 του canonical JSON του config
    config_hash = Column(String(64), nullable=True)

    out_dir = Column(Text, nullable=True)

    # ok | failed
    status = Column(String(20), nullable=False, default="ok")
    exit_code = Column(Integer, nullable=False, default=0)

    started_at = Column(DateTime(timezone=True), server_default=func.now())
    finished_at = Column(DateTime(timezone=True), nullable=True)

    def __repr__(self):
        return f"<Run(id={self.id}, command='{self.command}', exit_code={self.exit_code})>"
