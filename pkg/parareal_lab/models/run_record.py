import json
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from .database import Base


class RunRecord(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)
    config_hash = Column(String, nullable=False, index=True)
    tool_version = Column(String, nullable=False)
    output_dir = Column(String, nullable=False)
    config_snapshot = Column(Text, nullable=False)
    timings = Column(Text, default="{}")                #seconds per phase
    total_seconds = Column(Float, default=0.0)
    status = Column(String, default="ok")
    created_at = Column(DateTime, default=datetime.utcnow)
    files = relationship("RunFile", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<RunRecord(id={self.id}, command='{self.command}', files={len(self.files)})>"

    def to_dict(self):
        return {
            "id": self.id,
            "command": self.command,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "output_dir": self.output_dir,
            "config": json.loads(self.config_snapshot) if self.config_snapshot else {},
            "timings": json.loads(self.timings) if self.timings else {},
            "status": self.status,
            "files": [f.to_dict() for f in self.files],
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }


class RunFile(Base):
    __tablename__ = "run_files"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    name = Column(String, nullable=False)
    size = Column(Integer, nullable=False)
    sha256 = Column(String, nullable=False)
    run = relationship("RunRecord", back_populates="files")

    def __repr__(self):
        return f"<RunFile(name='{self.name}', size={self.size})>"

    def to_dict(self):
        return {"name": self.name, "size": self.size, "sha256": self.sha256}
